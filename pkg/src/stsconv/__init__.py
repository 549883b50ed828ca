"""Speech-to-singing conversion on a small numpy autodiff engine.

Modules
-------
audio_io   wav / feature-file / manifest I/O and the synthetic corpus renderer
dsp        STFT, mel, F0, rhythm curves, silence trimming, Griffin-Lim
tensor     reverse-mode autodiff tensor and checkpoint archive format
nn         layers, windowed cross-attention, guided attention loss, Adam
rhythm     VQ rhythm codebook and the rhythm predictor
aligner    cross-modal aligner and stream fusion
diffusion  few-step diffusion mel decoder and its losses
metrics    LSD, raw chroma accuracy, rhythm distance
model      the assembled conversion model and checkpoints
"""
from __future__ import annotations

__version__ = "0.1.0"
