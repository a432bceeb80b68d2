"""Speech-queried attention masking for masked motion modeling.

Pipeline stages: synthetic corpus generation, an RVQ motion tokenizer,
a motion-audio joint embedding trained with InfoNCE, speech-queried
attention scores driving a soft-to-hard masking schedule, and an EMA
teacher/student masked transformer with seed-conditioned inference.
"""

from .numerics import ParamSet, RngState, cross_attention, softmax_rows, transformer_block

__all__ = [
    "ParamSet",
    "RngState",
    "cross_attention",
    "softmax_rows",
    "transformer_block",
]

__version__ = "0.1.0"
