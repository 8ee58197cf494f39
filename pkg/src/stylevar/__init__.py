"""Scale-wise autoregressive style transfer with blended cross-attention, trained by SFT then GRPO."""

__version__ = "0.1.0"
