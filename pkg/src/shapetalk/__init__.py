"""Shape-world testbed for bidirectional image-text reconstruction.

Two small generative models (an autoregressive captioner and a conditional
pixel-space diffusion model) talk to each other over a synthetic shape
dataset: captions are ranked by how well they let the diffuser rebuild the
source image, and both models can be finetuned jointly through a
differentiable soft-token bridge.
"""

__version__ = "0.1.0"
