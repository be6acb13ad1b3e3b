import pytest
import torch


@pytest.fixture(autouse=True)
def _default_precision():
    """Keep the global float mode clean across tests."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(old)


def gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g
