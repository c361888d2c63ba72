import pytest

from llmvox.codec import Codec, CodecConfig
from llmvox.model import ModelConfig, SpeechDecoder

TINY_CODEC = CodecConfig(feature_dim=48)


def tiny_model(n_layer=2, text_dim=16, n_head=4, block_size=512, seed=0, codec_cfg=TINY_CODEC):
    codec = Codec(codec_cfg)
    cfg = ModelConfig.for_codec(codec.cfg, text_dim=text_dim, n_layer=n_layer, n_head=n_head, block_size=block_size, seed=seed)
    return SpeechDecoder(cfg, codec).eval()


@pytest.fixture
def codec():
    return Codec(CodecConfig())


@pytest.fixture(scope="session")
def model():
    return tiny_model()


class ScriptedSession:
    """Stands in for a generation session: replays fixed tokens, optionally failing."""

    def __init__(self, tokens, fail_at=None):
        self.tokens = list(tokens)
        self.fail_at = fail_at
        self.pos = 0
        self.done = False

    def step(self):
        if self.done:
            return None
        if self.fail_at is not None and self.pos == self.fail_at:
            raise RuntimeError("synthetic synthesis failure")
        if self.pos == len(self.tokens):
            self.done = True
            return None
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
