"""Anatomy-prior contrastive pretraining on synthetic cine cardiac MR phantoms."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward  # noqa: F401
from .phantom import PhantomConfig, generate_dataset, read_dataset, write_dataset  # noqa: F401
from .contrastive import NTXentConfig, PretrainConfig, ntxent_loss, pretrain  # noqa: F401
from .classify import binary_auc, macro_auc  # noqa: F401
