"""Desk-scale experiment harness: shift runs, few-samples sweep, layer comparison.

Every run is a pure function of its seed.  Trained networks are cached per
process so the sweeps can share them.
"""
import csv
import logging
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import data
from . import net as toynet
from .adapt import AdaptConfig, fit_reconstruction

log = logging.getLogger(__name__)

SOURCE_PER_CLASS = 200
TEST_PER_CLASS = 50
TARGET_PER_CLASS = 100
TRAIN_EPOCHS = 12
TRAIN_LR = 0.02
FEW_SAMPLE_COUNTS = (1, 5, 10, 50)


@dataclass(frozen=True)
class Task:
    net: toynet.ToyNet
    source: data.DatasetBundle
    source_test: data.DatasetBundle
    target: data.DatasetBundle


@lru_cache(maxsize=16)
def trained(seed, per_class=SOURCE_PER_CLASS, epochs=TRAIN_EPOCHS, learning_rate=TRAIN_LR):
    source = data.gen_shapes(per_class, seed=seed)
    return toynet.train(source, epochs=epochs, learning_rate=learning_rate, seed=seed), source


def prepare(seed, shift="gray", per_class=SOURCE_PER_CLASS, epochs=TRAIN_EPOCHS, learning_rate=TRAIN_LR):
    """Seeded ToyNet trained on shapes, plus held-out source and a shifted target pool."""
    net, source = trained(seed, per_class, epochs, learning_rate)
    source_test = data.gen_shapes(TEST_PER_CLASS, seed=seed + 1000)
    target = data.gen_shapes(TARGET_PER_CLASS, seed=seed + 2000)
    if shift != "none":
        target = data.apply_shift(target, shift, seed=seed)
    return Task(net, source, source_test, target)


def adapt_and_score(task, available, config):
    """Fit on ``available`` target images, score on the full target pool and source test set."""
    src = toynet.capture_stage(task.net, task.source, config.layer, config.stage)
    tgt = toynet.capture_stage(task.net, available, config.layer, config.stage)
    model = fit_reconstruction(src, tgt, config)
    return model, {
        "acc_src_base": toynet.evaluate(task.net, task.source_test),
        "acc_src_adapted": toynet.evaluate(task.net, task.source_test, model),
        "acc_tgt_base": toynet.evaluate(task.net, task.target),
        "acc_tgt_adapted": toynet.evaluate(task.net, task.target, model),
        "n_bad": len(model.bad_filters),
        "kl_max_over_median": float(np.max(model.kl) / max(np.median(model.kl), 1e-12)),
    }


def shift_run(seed, shift="gray", target_frac=0.1, config=None, n_target=None):
    config = replace(config or AdaptConfig(), seed=seed)
    task = prepare(seed, shift)
    available = data.take_fraction(task.target, target_frac, seed=seed, count=n_target)
    model, row = adapt_and_score(task, available, config)
    row.update(seed=seed, shift=shift, layer=config.layer, n_target=len(available))
    log.info("seed %d: target %.4f -> %.4f, %d bad", seed, row["acc_tgt_base"], row["acc_tgt_adapted"], row["n_bad"])
    return row


def headline(seeds=range(5), shift="gray", target_frac=0.1, config=None):
    return [shift_run(s, shift, target_frac, config) for s in seeds]


def few_samples(seeds=range(3), counts=FEW_SAMPLE_COUNTS, shift="gray", config=None):
    rows = []
    for seed in seeds:
        for n in counts:
            r = shift_run(seed, shift, config=config, n_target=n)
            rows.append({"n_target": n, "seed": seed, "acc_base": r["acc_tgt_base"], "acc_adapted": r["acc_tgt_adapted"]})
    return rows


def layers(seeds=range(5), shift="gray", target_frac=0.1, config=None):
    config = config or AdaptConfig()
    rows = []
    for layer in (1, 2):
        for r in headline(seeds, shift, target_frac, replace(config, layer=layer)):
            rows.append(r)
    return rows


def no_shift(seed=0, target_frac=0.1, config=None):
    """Target drawn from the source distribution itself."""
    config = replace(config or AdaptConfig(), seed=seed)
    task = prepare(seed, "none")
    available = data.take_fraction(task.source, target_frac, seed=seed)
    model, row = adapt_and_score(task, available, config)
    row.update(seed=seed, shift="none", layer=config.layer, n_target=len(available),
               n_filters=model.n_filters)
    return row


def mean_improvement(rows, base="acc_tgt_base", adapted="acc_tgt_adapted"):
    return float(np.mean([r[adapted] - r[base] for r in rows])) * 100.0


def write_rows(rows, path, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in columns])
