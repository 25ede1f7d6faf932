import pytest
import torch

from rsktseg.foundation import ClassVocabulary
from rsktseg.fusion import FusionConfig
from rsktseg.transfer import DecoderConfig, ModelConfig


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def small_config(**kw) -> ModelConfig:
    """Tiny model: 2-block encoders, d_c 16, for fast unit tests."""
    fusion = FusionConfig(**{"num_layers": 1, "d_c": 16, "heads": 2, **kw.pop("fusion", {})})
    decoder = DecoderConfig(
        **{"num_layers": 2, "clip_layers": [1, 2], "dino_layers": [1, 2], "remoteclip_layers": [1, 2], **kw.pop("decoder", {})}
    )
    return ModelConfig(**{"embed_dim": 16, "encoder_layers": 2, "fusion": fusion, "decoder": decoder, **kw})


@pytest.fixture
def vocab3():
    return ClassVocabulary(["building", "tree", "water"])


_ACCEPTANCE = []


@pytest.fixture
def acceptance_record():
    def record(criterion: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((criterion, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
