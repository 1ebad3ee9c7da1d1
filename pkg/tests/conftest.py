import pytest

from cxrssl.synthcxr import GenSpec, generate


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """160 images at 64 px with masks; shared read-only across tests."""
    out = tmp_path_factory.mktemp("corpus")
    return generate(GenSpec(count=160, seed=11), out)


@pytest.fixture(scope="session")
def tiny_trained(tmp_path_factory, small_corpus):
    """A checkpoint after a handful of pre-training steps on the small corpus."""
    from cxrssl.trainer import TrainConfig, pretrain

    out = tmp_path_factory.mktemp("tiny_run")
    cfg = TrainConfig(manifest=str(small_corpus), batch=8, steps=4, out_dir=str(out))
    pretrain(cfg)
    return out / "final.ckpt"


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
