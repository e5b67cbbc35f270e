//! Feature encoder, conditioning assembly and the U-Net vector field estimator.

use candle_core::{DType, Device, Tensor, Var};

use super::config::VfeConfig;
use super::embed::{positional_tensor, time_features};
use super::layers::{gelu, Conv2d, ConvNextBlock, Downsample, LayerNorm, Linear, Upsample};
use super::params::{value, ParamBuilder, ParamStore};
use crate::error::{Error, Result};
use crate::flow::check_finite;

/// Adaptive average pooling of axis 1 down to `bins` cells.
pub(crate) fn adaptive_pool_axis1(x: &Tensor, bins: usize) -> Result<Tensor> {
    let len = x.dim(1)?;
    let cells = (0..bins)
        .map(|i| {
            let start = i * len / bins;
            let end = ((i + 1) * len).div_ceil(bins);
            Ok(x.narrow(1, start, end - start)?.mean_keepdim(1)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&cells, 1)?)
}

/// Maps the compressed low band to a frame-wise feature sequence.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    input: Conv2d,
    pos_proj: Linear,
    rate_proj: Linear,
    layers: Vec<(LayerNorm, Conv2d)>,
    out_norm: LayerNorm,
    out: Linear,
    pool_bins: usize,
}

impl FeatureEncoder {
    fn new(pb: &mut ParamBuilder, cfg: &VfeConfig) -> Result<Self> {
        let h = cfg.encoder_channels;
        let d = cfg.d_cond;
        let k = cfg.encoder_kernel;
        pb.scoped("encoder", |pb| {
            let input = Conv2d::new(pb, "input", 2, h, k)?;
            let pos_proj = Linear::new(pb, "pos_proj", d, h)?;
            let rate_proj = Linear::new(pb, "rate_proj", d, h)?;
            let layers = (1..cfg.encoder_layers)
                .map(|i| {
                    Ok((
                        LayerNorm::new(pb, &format!("layers.{i}.norm"), h)?,
                        Conv2d::new(pb, &format!("layers.{i}.conv"), h, h, k)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                input,
                pos_proj,
                rate_proj,
                layers,
                out_norm: LayerNorm::new(pb, "out_norm", cfg.pool_bins * h)?,
                out: Linear::new(pb, "out", cfg.pool_bins * h, d)?,
                pool_bins: cfg.pool_bins,
            })
        })
    }

    /// `x_l`: `[N, F1, T, 2]`, `p_lf`: `[F1, D]`, `e_sr`: `[N, D]` -> `[N, T, D]`.
    pub fn forward(&self, x_l: &Tensor, p_lf: &Tensor, e_sr: &Tensor) -> Result<Tensor> {
        let (n, f1, t, _) = x_l.dims4()?;
        let pos = self.pos_proj.forward(p_lf)?;
        let hidden = pos.dim(1)?;
        let rate = self.rate_proj.forward(e_sr)?.reshape((n, 1, 1, hidden))?;
        let mut h = self
            .input
            .forward(x_l)?
            .broadcast_add(&pos.reshape((1, f1, 1, hidden))?)?
            .broadcast_add(&rate)?;
        for (norm, conv) in &self.layers {
            h = (&h + conv.forward(&gelu(&norm.forward(&h)?)?)?)?;
        }
        let pooled = adaptive_pool_axis1(&h, self.pool_bins)?
            .permute((0, 2, 1, 3))?
            .reshape((n, t, self.pool_bins * hidden))?;
        self.out.forward(&self.out_norm.forward(&pooled)?)
    }
}

/// Everything the estimator needs besides `t` and `x_t`.
#[derive(Clone, Debug)]
pub struct ConditioningSet {
    /// Spatial condition map `[N, G, T, D]`.
    pub map: Tensor,
    /// Sampling-rate embedding `[N, D]`.
    pub rate: Tensor,
}

/// U-Net of ConvNeXt-V2 stages over the generation band.
#[derive(Clone, Debug)]
pub struct VectorField {
    film: Linear,
    time_in: Linear,
    time_out: Linear,
    stem: Conv2d,
    enc: Vec<Vec<ConvNextBlock>>,
    down: Vec<Downsample>,
    mid: Vec<ConvNextBlock>,
    up: Vec<Upsample>,
    fuse: Vec<Linear>,
    dec: Vec<Vec<ConvNextBlock>>,
    head_norm: LayerNorm,
    head: Linear,
}

impl VectorField {
    fn new(pb: &mut ParamBuilder, cfg: &VfeConfig) -> Result<Self> {
        let d = cfg.d_cond;
        let ch = cfg.stage_channels();
        let s = cfg.n_stages();
        let block = |pb: &mut ParamBuilder, name: String, c: usize| {
            ConvNextBlock::new(pb, &name, c, d, cfg.block_kernel, cfg.block_expansion)
        };
        let mut film_bias = vec![1.0; d];
        film_bias.extend(std::iter::repeat_n(0.0, d));
        Ok(Self {
            film: Linear::with_init(pb, "film", d, 2 * d, 0.0, film_bias)?,
            time_in: Linear::new(pb, "time.0", d, d)?,
            time_out: Linear::new(pb, "time.1", d, d)?,
            stem: Conv2d::new(pb, "stem", 2 + d, ch[0], 3)?,
            enc: (0..s)
                .map(|i| {
                    (0..cfg.stage_depths[i])
                        .map(|j| block(pb, format!("enc.{i}.{j}"), ch[i]))
                        .collect()
                })
                .collect::<Result<_>>()?,
            down: (0..s - 1)
                .map(|i| Downsample::new(pb, &format!("down.{i}"), ch[i], ch[i + 1]))
                .collect::<Result<_>>()?,
            mid: (0..cfg.bottleneck_depth)
                .map(|j| block(pb, format!("mid.{j}"), ch[s - 1]))
                .collect::<Result<_>>()?,
            up: (0..s - 1)
                .map(|i| Upsample::new(pb, &format!("up.{i}"), ch[i + 1], ch[i]))
                .collect::<Result<_>>()?,
            fuse: (0..s)
                .map(|i| Linear::new(pb, &format!("fuse.{i}"), 2 * ch[i], ch[i]))
                .collect::<Result<_>>()?,
            dec: (0..s)
                .map(|i| {
                    (0..cfg.stage_depths[i])
                        .map(|j| block(pb, format!("dec.{i}.{j}"), ch[i]))
                        .collect()
                })
                .collect::<Result<_>>()?,
            head_norm: LayerNorm::new(pb, "head_norm", ch[0])?,
            head: Linear::new(pb, "head", ch[0], 2)?,
        })
    }

    /// `c_lf`: `[N, T, D]`, `p_hf`: `[G, D]` -> `[N, G, T, D]`.
    fn modulate(&self, c_lf: &Tensor, p_hf: &Tensor) -> Result<Tensor> {
        let (g, d) = p_hf.dims2()?;
        let gb = self.film.forward(p_hf)?;
        let gamma = gb.narrow(1, 0, d)?.reshape((1, g, 1, d))?;
        let beta = gb.narrow(1, d, d)?.reshape((1, g, 1, d))?;
        Ok(c_lf
            .unsqueeze(1)?
            .broadcast_mul(&gamma)?
            .broadcast_add(&beta)?)
    }

    fn time_embedding(
        &self,
        t: &[f64],
        scale: f64,
        dim: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let f = time_features(t, scale, dim, dtype, device)?;
        self.time_out.forward(&gelu(&self.time_in.forward(&f)?)?)
    }

    fn unet(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let s = self.enc.len();
        let mut h = self.stem.forward(x)?;
        let mut skips = Vec::with_capacity(s);
        for i in 0..s {
            for b in &self.enc[i] {
                h = b.forward(&h, g)?;
            }
            skips.push(h.clone());
            if i + 1 < s {
                h = self.down[i].forward(&h)?;
            }
        }
        for b in &self.mid {
            h = b.forward(&h, g)?;
        }
        for i in (0..s).rev() {
            if i + 1 < s {
                h = self.up[i].forward(&h)?;
            }
            h = self.fuse[i].forward(&Tensor::cat(&[&h, &skips[i]], 3)?)?;
            for b in &self.dec[i] {
                h = b.forward(&h, g)?;
            }
        }
        self.head.forward(&self.head_norm.forward(&h)?)
    }
}

/// Learnable components of the super-resolution model.
#[derive(Clone, Debug)]
pub struct SrModel {
    cfg: VfeConfig,
    params: ParamStore,
    encoder: FeatureEncoder,
    field: VectorField,
    rate_table: Var,
    null: Var,
    positions: Tensor,
    dtype: DType,
    device: Device,
}

impl SrModel {
    pub fn new(cfg: VfeConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed, dtype, device);
        let encoder = FeatureEncoder::new(&mut pb, &cfg)?;
        let (field, rate_table, null) = pb.scoped("vfe", |pb| {
            let field = VectorField::new(pb, &cfg)?;
            let rate_table = pb.normal("rate_embedding", &[cfg.rates.len(), cfg.d_cond], 0.02)?;
            let null = pb.normal("null_embedding", &[cfg.d_cond], 0.02)?;
            Ok((field, rate_table, null))
        })?;
        let positions = positional_tensor(cfg.total_bins, cfg.d_cond, dtype, device)?;
        Ok(Self {
            cfg,
            params: pb.finish(),
            encoder,
            field,
            rate_table,
            null,
            positions,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &VfeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn null_vector(&self) -> &Var {
        &self.null
    }

    /// `[N, D]` sampling-rate embeddings for per-item rate indices.
    pub fn rate_embedding(&self, rate_idx: &[usize]) -> Result<Tensor> {
        let n_rates = self.cfg.rates.len();
        if let Some(&bad) = rate_idx.iter().find(|&&i| i >= n_rates) {
            return Err(Error::InvalidArgument(format!(
                "rate index {bad} >= {n_rates}"
            )));
        }
        let ids: Vec<u32> = rate_idx.iter().map(|&i| i as u32).collect();
        let ids = Tensor::from_vec(ids, rate_idx.len(), &self.device)?;
        Ok(value(&self.rate_table).index_select(&ids, 0)?)
    }

    /// `x_l`: `[N, F1, T, 2]` compressed low band -> `c_lf`: `[N, T, D]`.
    pub fn feature_encode(&self, x_l: &Tensor, rate_idx: &[usize]) -> Result<Tensor> {
        let (n, f1, _, c) = x_l.dims4()?;
        if c != 2 || n != rate_idx.len() {
            return Err(Error::shape(
                format!("[{}, F1, T, 2]", rate_idx.len()),
                format!("{:?}", x_l.dims()),
            ));
        }
        if f1 < self.cfg.min_cutoff_bins || f1 >= self.cfg.total_bins {
            return Err(Error::InvalidArgument(format!(
                "low band of {f1} bins outside [{}, {})",
                self.cfg.min_cutoff_bins, self.cfg.total_bins
            )));
        }
        let p_lf = self.positions.narrow(0, 0, f1)?;
        self.encoder.forward(
            &x_l.to_dtype(self.dtype)?,
            &p_lf,
            &self.rate_embedding(rate_idx)?,
        )
    }

    /// The learnable null vector repeated over `frames` rows, `[N, T, D]`.
    pub fn null_condition(&self, n: usize, frames: usize) -> Result<Tensor> {
        Ok(value(&self.null)
            .reshape((1, 1, self.cfg.d_cond))?
            .broadcast_as((n, frames, self.cfg.d_cond))?
            .contiguous()?)
    }

    /// Replaces `c_lf` by the null vector for items flagged in `use_null`.
    pub fn mix_null(&self, c_lf: &Tensor, use_null: &[bool]) -> Result<Tensor> {
        let (n, t, _) = c_lf.dims3()?;
        if use_null.len() != n {
            return Err(Error::shape(n, use_null.len()));
        }
        if use_null.iter().all(|&u| !u) {
            return Ok(c_lf.clone());
        }
        if use_null.iter().all(|&u| u) {
            return self.null_condition(n, t);
        }
        let mask: Vec<f64> = use_null
            .iter()
            .map(|&u| if u { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, (n, 1, 1), &self.device)?.to_dtype(self.dtype)?;
        let keep = (mask.ones_like()? - &mask)?;
        Ok((c_lf.broadcast_mul(&keep)? + self.null_condition(n, t)?.broadcast_mul(&mask)?)?)
    }

    /// FiLM-modulated broadcast of `c_lf` over the generation band, `[N, G, T, D]`.
    pub fn assemble_condition(&self, c_lf: &Tensor) -> Result<Tensor> {
        let g = self.cfg.gen_bins();
        let p_hf = self.positions.narrow(0, self.cfg.min_cutoff_bins, g)?;
        self.field.modulate(c_lf, &p_hf)
    }

    /// Encoder, null substitution and FiLM in one call.
    pub fn condition(
        &self,
        x_l: &Tensor,
        rate_idx: &[usize],
        use_null: &[bool],
    ) -> Result<ConditioningSet> {
        let c_lf = if use_null.iter().all(|&u| u) {
            let (n, _, t, _) = x_l.dims4()?;
            self.null_condition(n, t)?
        } else {
            self.mix_null(&self.feature_encode(x_l, rate_idx)?, use_null)?
        };
        Ok(ConditioningSet {
            map: self.assemble_condition(&c_lf)?,
            rate: self.rate_embedding(rate_idx)?,
        })
    }

    /// Estimated velocity for `x_t`: `[N, G, T, 2]` at per-item times `t`.
    pub fn vfe_forward(&self, t: &[f64], x_t: &Tensor, cond: &ConditioningSet) -> Result<Tensor> {
        let (n, g, frames, c) = x_t.dims4()?;
        if g != self.cfg.gen_bins() || c != 2 || t.len() != n {
            return Err(Error::shape(
                format!("[{}, {}, T, 2]", t.len(), self.cfg.gen_bins()),
                format!("{:?}", x_t.dims()),
            ));
        }
        let (mn, mg, mt, _) = cond.map.dims4()?;
        if (mn, mg, mt) != (n, g, frames) {
            return Err(Error::shape(
                format!("condition map [{n}, {g}, {frames}, D]"),
                format!("{:?}", cond.map.dims()),
            ));
        }
        let e_t = self.field.time_embedding(
            t,
            self.cfg.time_scale,
            self.cfg.d_cond,
            self.dtype,
            &self.device,
        )?;
        let global = (e_t + &cond.rate)?;
        let multiple = self.cfg.resolution_multiple();
        let padded_t = frames.div_ceil(multiple) * multiple;
        let x = Tensor::cat(&[&x_t.to_dtype(self.dtype)?, &cond.map], 3)?;
        let x = if padded_t > frames {
            x.pad_with_zeros(2, 0, padded_t - frames)?
        } else {
            x
        };
        let out = self.field.unet(&x, &global)?.narrow(2, 0, frames)?;
        if !check_finite(&out)? {
            return Err(Error::NonFinite("vector field estimator output".into()));
        }
        Ok(out)
    }
}
