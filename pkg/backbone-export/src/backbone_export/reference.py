"""A tiny frame-wise CNN satisfying the exporter's model contract.

Used by the test-suite, and as a template for wrapping a real pre-trained
backbone: script your model with the same three metadata attributes and the
``(1, n_samples) -> (1, D, T)`` forward, save it with ``torch.jit.save``,
and point ``backbone-export export --model`` at the file.
"""

from __future__ import annotations

import torch
from torch import nn


class TinyFrameCnn(nn.Module):
    """Three strided convolutions; stride product 640 gives 40 ms frames
    at 16 kHz (160000 samples -> 250 frames)."""

    def __init__(self, dim: int = 24, seed: int = 0):
        super().__init__()
        self.sample_rate = 16000
        self.embedding_dim = dim
        self.frame_period = 0.040
        self.conv1 = nn.Conv1d(1, 16, kernel_size=8, stride=8)
        self.conv2 = nn.Conv1d(16, 32, kernel_size=8, stride=8)
        self.conv3 = nn.Conv1d(32, dim, kernel_size=10, stride=10)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in (self.conv1, self.conv2, self.conv3):
                m.weight.copy_(torch.rand(m.weight.shape, generator=g) - 0.5)
                m.bias.copy_(torch.rand(m.bias.shape, generator=g) - 0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.unsqueeze(1)
        h = torch.relu(self.conv1(h))
        h = torch.relu(self.conv2(h))
        return self.conv3(h)


def build_reference_model(dim: int = 24, seed: int = 0) -> torch.jit.ScriptModule:
    return torch.jit.script(TinyFrameCnn(dim=dim, seed=seed).eval())


def save_reference_model(path, dim: int = 24, seed: int = 0) -> None:
    torch.jit.save(build_reference_model(dim=dim, seed=seed), str(path))
