"""Diffusion-based video-to-speech synthesis with a vision-guided
speaker embedding, trained and evaluated end-to-end on a procedurally
generated multi-speaker toy corpus."""

__version__ = "0.1.0"
