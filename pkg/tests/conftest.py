import time

import pytest

from stt import data, toydata
from stt import model as m
from stt import trainer


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """8 images x 5 captions toy dataset on disk plus in-memory handles."""
    root = tmp_path_factory.mktemp("toy_corpus")
    features_path, captions_path = toydata.write_toy_dataset(
        root, num_images=8, captions_per_image=5, feature_dim=64, seed=0)
    store = data.read_feature_file(features_path)
    captions = data.load_captions(captions_path)
    vocab = data.build_vocab(captions, min_freq=1)
    return {
        "root": root,
        "features_path": features_path,
        "captions_path": captions_path,
        "store": store,
        "captions": captions,
        "vocab": vocab,
        "samples": data.make_samples(captions, vocab),
    }


@pytest.fixture(scope="session")
def overfit_run(toy_corpus, tmp_path_factory):
    """One fully trained toy model shared by the expensive tests.

    160 samples / batch 32 = 5 iterations per epoch; 100 epochs = 500
    iterations, the acceptance budget.
    """
    out = tmp_path_factory.mktemp("overfit_run")
    hyper = m.HyperParams(**{**m.PROFILES["toy"].to_dict(), "epochs": 100})
    settings = trainer.TrainSettings(
        hyper=hyper, seed=1, out_dir=out, checkpoint_every=100,
        vocab_hash=toy_corpus["vocab"].content_hash())
    started = time.monotonic()
    ckpt, rows = trainer.train(settings, toy_corpus["store"],
                               toy_corpus["samples"],
                               len(toy_corpus["vocab"]))
    elapsed = time.monotonic() - started
    return {"checkpoint": ckpt, "rows": rows, "out": out,
            "params": ckpt.to_params(), "hyper": hyper,
            "train_seconds": elapsed}


@pytest.fixture
def small_cli_dataset(tmp_path):
    """A 4-image dataset for fast CLI end-to-end runs."""
    features_path, captions_path = toydata.write_toy_dataset(
        tmp_path / "data", num_images=4, captions_per_image=2,
        feature_dim=16, seed=3)
    return {"root": tmp_path, "features": features_path,
            "captions": captions_path}
