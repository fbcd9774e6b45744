"""Fixture modules (torch-only) and spec documents for harness tests."""

import pytest

LINEAR_SPEC = """
name: linear_relu
level: 1
inputs:
  - name: x
    shape: [B, F]
    dtype: inherit
inits: {in_features: 16, out_features: 16}
variants:
  ci:
    group: ci
    dims: {B: 4, F: 16}
    dtype: float32
  ci_wide:
    group: ci
    dims: {B: 8, F: 16}
    dtype: float32
"""

LINEAR_MODEL = """
import torch


class Model(torch.nn.Module):
    def __init__(self, in_features=16, out_features=16):
        super().__init__()
        self.linear = torch.nn.Linear(in_features, out_features)

    def forward(self, x):
        return torch.relu(self.linear(x))


def get_inputs():
    import torch
    return [torch.randn(4, 16)]


def get_init_inputs():
    return [16, 16]
"""

# Same computation, different parameter names: exercises the positional
# weight-copy fallback.
RENAMED_MODEL = """
import torch


class Model(torch.nn.Module):
    def __init__(self, in_features=16, out_features=16):
        super().__init__()
        self.projection = torch.nn.Linear(in_features, out_features)

    def forward(self, x):
        return torch.relu(self.projection(x))
"""

NAN_MODEL = """
import torch


class Model(torch.nn.Module):
    def __init__(self, in_features=16, out_features=16):
        super().__init__()
        self.linear = torch.nn.Linear(in_features, out_features)

    def forward(self, x):
        return self.linear(x) * float("nan")
"""

WRONG_SHAPE_MODEL = """
import torch


class Model(torch.nn.Module):
    def __init__(self, in_features=16, out_features=16):
        super().__init__()
        self.linear = torch.nn.Linear(in_features, out_features)

    def forward(self, x):
        return self.linear(x)[:, :8]
"""

SLIGHTLY_OFF_MODEL = """
import torch


class Model(torch.nn.Module):
    def __init__(self, in_features=16, out_features=16):
        super().__init__()
        self.linear = torch.nn.Linear(in_features, out_features)

    def forward(self, x):
        return torch.relu(self.linear(x)) + 1e-3
"""


@pytest.fixture
def linear_spec_yaml():
    return LINEAR_SPEC


@pytest.fixture
def linear_model_source():
    return LINEAR_MODEL
