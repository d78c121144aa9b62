"""Joint multimodal MRI reconstruction and synthesis with a learnable descent solver."""

__version__ = "0.1.0"
