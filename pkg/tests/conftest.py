import numpy as np
import pytest
import torch

import emoprefix  # noqa: F401  (float64 default)
from emoprefix.acoustic_model import AcousticConfig
from emoprefix.prefix_encoder import PrefixEncoderConfig
from emoprefix.sequence_model import SequenceModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def tiny_seq_cfg(**kw):
    base = dict(audio_vocab=10, content_vocab=6, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=64,
                lora_rank=2, lora_alpha=4.0)
    base.update(kw)
    return SequenceModelConfig(**base)


def tiny_prefix_cfg(**kw):
    base = dict(n_mel=4, d_style=8, n_layers=1, n_heads=2, d_ff=16, n_latents=3, d_emo=4, d_model=8)
    base.update(kw)
    return PrefixEncoderConfig(**base)


def tiny_acoustic_cfg(**kw):
    base = dict(audio_vocab=10, n_mel=3, d_model=8, n_layers=1, n_heads=2, d_ff=16)
    base.update(kw)
    return AcousticConfig(**base)


TINY_INI = """
[corpus]
n_contents = 24
min_segments = 4
max_segments = 6
min_base_frames = 16

[split]
n_train = 14
n_reference = 4
n_test = 6

[tokenizer]
codebook_size = 16
iters = 10

[sequence]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_len = 128

[prefix]
d_style = 8
n_layers = 1
d_ff = 16
n_latents = 2
d_emo = 8

[acoustic]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32

[train]
batch_size = 4
warmup = 2
backbone_steps = 6
stage2_steps = 5
prefix_steps = 4
probe_steps = 300

[sampling]
max_len = 40
fm_steps = 2

[eval]
max_conversions = 24
"""


def run_cli(base, *argv, config=None):
    from emoprefix.cli import main

    pre = ["--base-dir", str(base)] + (["--config", str(config)] if config else [])
    return main(pre + [str(a) for a in argv])


@pytest.fixture(scope="session")
def tiny_ini(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    p.write_text(TINY_INI)
    return p


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory, tiny_ini):
    """Every stage trained for a handful of steps through the CLI; treat as read-only."""
    base = tmp_path_factory.mktemp("ws")
    for argv in (["gen-data"], ["train", "--stage", "tokenizer"], ["train", "--stage", "probes"],
                 ["train", "--stage", "backbone"], ["train", "--stage", "stage2"], ["train", "--stage", "prefix"],
                 ["train", "--stage", "prefix", "--mode", "prepend"]):
        assert run_cli(base, *argv, config=tiny_ini) == 0, argv
    return base


# Acceptance verdicts, printed as one line per criterion at the end of the run.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
