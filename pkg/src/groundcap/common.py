"""Small shared helpers for the model modules."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

EPS = 1e-8


def as_double_tensor(x: np.ndarray | Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(torch.float64)
    return torch.from_numpy(np.ascontiguousarray(x)).to(torch.float64)


def uniform_init(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic re-init: uniform bounds per layer kind, fixed name order."""
    for _, mod in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(mod, nn.Embedding):
            mod.weight.data.uniform_(-0.1, 0.1, generator=generator)
        elif isinstance(mod, nn.Linear):
            bound = 1.0 / math.sqrt(mod.in_features)
            mod.weight.data.uniform_(-bound, bound, generator=generator)
            if mod.bias is not None:
                mod.bias.data.uniform_(-bound, bound, generator=generator)
        elif isinstance(mod, (nn.GRUCell, nn.LSTMCell)):
            bound = 1.0 / math.sqrt(mod.hidden_size)
            for _, p in sorted(mod.named_parameters(), key=lambda kv: kv[0]):
                p.data.uniform_(-bound, bound, generator=generator)
