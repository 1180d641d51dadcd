import numpy as np
import pytest
from loguru import logger

from balnorm.config import build_train_config
from balnorm.data import synth_blobs
from balnorm.metrics import aggregate, convergence_ordering
from balnorm.model import load_checkpoint
from balnorm.norms import Mode
from balnorm.training import evaluate, train

QUICK = {"subset": 32, "epochs": 2, "batch_size": 16, "image_size": 8, "num_classes": 4, "lr": 0.05}


def quick_config(**overrides):
    return build_train_config({**QUICK, **overrides})


def test_records_per_epoch(tmp_path):
    records = train(quick_config(out=str(tmp_path / "m.csv")))
    assert [r.epoch for r in records] == [1, 2]
    assert all(np.isfinite(r.train_loss) and 0.0 <= r.test_acc <= 1.0 for r in records)
    assert all(r.wall_seconds == 0.0 for r in records)
    assert (tmp_path / "m.csv").is_file()


def test_same_seed_same_metrics(tmp_path):
    a = train(quick_config(out=str(tmp_path / "a.csv"), mixup_alpha=0.2))
    b = train(quick_config(out=str(tmp_path / "b.csv"), mixup_alpha=0.2))
    assert a == b
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_every_norm_trains(norm_flag):
    records = train(quick_config(norm=norm_flag, epochs=1))
    assert np.isfinite(records[0].train_loss)


def test_one_cycle_sets_learning_rate():
    records = train(quick_config(schedule="onecycle", epochs=2, lr=0.02))
    assert records[0].lr == 0.02
    assert records[1].lr > 0.02


def test_schedule_is_logged_per_epoch():
    messages = []
    handler = logger.add(messages.append, level="DEBUG", format="{message}")
    try:
        train(quick_config(epochs=2))
    finally:
        logger.remove(handler)
    assert [m.strip() for m in messages if m.startswith("schedule epoch")] == [
        "schedule epoch 1: lr=0.05 momentum=0.9",
        "schedule epoch 2: lr=0.05 momentum=0.9",
    ]


def test_trained_network_eval_is_batch_independent(tmp_path):
    train(quick_config(checkpoint=str(tmp_path / "net.bnt1")))
    net = load_checkpoint(tmp_path / "net.bnt1")
    images = synth_blobs(64, 4, seed=9, size=8).images
    single = np.concatenate([net.forward(images[i : i + 1], Mode.EVAL).value for i in range(len(images))])
    batched = net.forward(images, Mode.EVAL).value
    np.testing.assert_allclose(single, batched, rtol=1e-9, atol=1e-12)


def test_evaluate_counts_every_instance(tiny_synth, tinynet, rng):
    tinynet.forward(tiny_synth.images[:8], Mode.TRAIN)
    loss, acc = evaluate(tinynet, tiny_synth, batch_size=5)
    assert np.isfinite(loss)
    assert acc * len(tiny_synth) == round(acc * len(tiny_synth))


@pytest.mark.slow
def test_balnorm_converges_ahead_of_baselines(tmp_path):
    bands = {}
    for norm in ("balnorm", "batchnorm", "none"):
        runs = {}
        for seed in range(3):
            out = tmp_path / f"{norm}_seed{seed}.csv"
            config = build_train_config({"norm": norm, "subset": 1000, "epochs": 10, "seed": seed, "out": str(out)})
            runs[out.name] = train(config)
        bands[norm] = aggregate(runs)
    verdict = convergence_ordering(bands)
    assert all(verdict.values()), verdict
