import pytest

from diffmel.config import RunConfig, from_dict
from diffmel.toydata import TOY_PHONES, make_toy_corpus

TOY_VOCAB = sorted(TOY_PHONES)


def desk_config(**overrides) -> RunConfig:
    """Small model + toy vocabulary, suitable for CPU tests."""
    data = {
        "feature": {},
        "model": {
            "d_model": 32,
            "vocab": TOY_VOCAB,
            "encoder_layers": 2,
            "encoder_heads": 2,
            "encoder_ff_dim": 64,
            "encoder_kernel": 3,
            "variance_hidden": 32,
            "speaker_dim": 16,
            "decoder_blocks": 2,
            "decoder_channels": 32,
            "disc_diffusion": {"base_channels": 8, "max_channels": 32},
            "disc_spectrogram": {"channels": 8},
        },
        "train": {
            "batch_size": 4,
            "total_steps": 20,
            "log_interval": 5,
            "checkpoint_interval": 10,
            "validation_count": 0,
            "seed": 77,
        },
    }
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return from_dict(data)


@pytest.fixture(scope="session")
def toy_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toycorpus")
    make_toy_corpus(root, n_utterances=10, seed=0)
    return root


@pytest.fixture(scope="session")
def preprocessed_dir(tmp_path_factory, toy_corpus_dir):
    from diffmel.preprocess import run_preprocess

    out = tmp_path_factory.mktemp("processed")
    cfg = desk_config()
    run_preprocess(cfg, toy_corpus_dir / "manifest.txt", out, workers=2)
    return out
