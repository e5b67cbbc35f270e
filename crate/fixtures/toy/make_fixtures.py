"""Regenerates the four toy clips and their manifest (48 kHz, 16-bit mono)."""
import json
import math
import random
import struct
import wave

RATE = 48000
LEN = 15872  # 32 STFT frames with hop 512 and centred framing


def harmonic(f0, decay, vibrato=0.0, am=0.0):
    out = []
    phase = [0.0] * 200
    for n in range(LEN):
        t = n / RATE
        f = f0 * (1.0 + vibrato * math.sin(2 * math.pi * 5.0 * t))
        env = 1.0 - am * (0.5 + 0.5 * math.cos(2 * math.pi * 3.0 * t))
        s = 0.0
        k = 1
        while k * f < 23000:
            phase[k] += 2 * math.pi * k * f / RATE
            s += math.sin(phase[k]) / k ** decay
            k += 1
        out.append(env * s)
    return out


def shaped_noise(seed):
    rng = random.Random(seed)
    x = [rng.gauss(0, 1) for _ in range(LEN)]
    # Gentle first-order tilt so the spectrum falls with frequency.
    y, prev = [], 0.0
    for v in x:
        prev = 0.6 * prev + v
        y.append(prev)
    return [v * (0.6 + 0.4 * math.sin(2 * math.pi * 4.0 * n / RATE)) for n, v in enumerate(y)]


def write(name, x, peak=0.5):
    m = max(abs(v) for v in x)
    with wave.open(name, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(RATE)
        w.writeframes(b"".join(struct.pack("<h", int(round(v / m * peak * 32767))) for v in x))


clips = [
    ("clip0.wav", "music", harmonic(220.0, 1.0)),
    ("clip1.wav", "speech", harmonic(140.0, 0.8, vibrato=0.03, am=0.6)),
    ("clip2.wav", "sfx", shaped_noise(7)),
    ("clip3.wav", "music", harmonic(330.0, 1.2, am=0.3)),
]
with open("manifest.jsonl", "w") as f:
    for name, domain, x in clips:
        write(name, x)
        f.write(json.dumps({"path": name, "domain": domain, "duration": LEN / RATE}) + "\n")
