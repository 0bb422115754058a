"""farm3d: feed-forward articulated 3D reconstruction trained on generated
images, scored by a diffusion critic, with a matching evaluation bench."""

__version__ = "0.1.0"
