import numpy as np
import pytest

from kgfewshot import numcore as nc
from kgfewshot import relate
from kgfewshot.evalkit import world as W
from kgfewshot.system import (ConceptSystem, NumericalError, TrainConfig, false_detections,
                              load_checkpoint, save_checkpoint, train_base)

from conftest import tiny_gsnn

SPEC = W.SyntheticWorldSpec(n_objects=8, n_attributes=4, n_affordances=2, n_contexts=2,
                            latent_width=5, n_patches=3, n_train=24, n_val=4, n_test=6, n_holdout=2)
TCFG = TrainConfig(epochs=3, batch_size=4)


def build(seed=0):
    world = W.generate_world(SPEC.with_overrides(seed=seed))
    rcfg = relate.RelateConfig(n_patches=3, patch_width=5, word_width=5, latent=4, mlp_hidden=4, pair_hidden=4)
    return world, ConceptSystem.build(world.base_graph(), tiny_gsnn(image_width=5), rcfg, seed=seed)


def test_training_loss_is_finite_and_decreases():
    world, system = build()
    losses, _ = train_base(system, world.base_split("train"), TrainConfig(epochs=6, batch_size=4))
    assert all(np.isfinite(losses)) and losses[-1] < losses[0]


def test_predictions_are_probabilities():
    world, system = build()
    p = system.predict(world.splits["test"])
    assert p.shape == (SPEC.n_test, system.layout.n_nodes)
    assert np.all((p > 0) & (p < 1))


def test_resume_is_bit_identical(tmp_path):
    world, a = build()
    _, b = build()
    data = world.base_split("train")
    full, _ = train_base(a, data, TCFG)

    losses = []
    ckpt = str(tmp_path / "ck")

    def on_epoch(epoch, loss, opt):
        losses.append(loss)
        save_checkpoint(ckpt, b, opt, epoch + 1, losses)

    train_base(b, data, TrainConfig(epochs=1, batch_size=4), on_epoch=on_epoch)
    _, c = build()
    start, prior, opt = load_checkpoint(ckpt, c, TCFG)
    rest, _ = train_base(c, data, TCFG, start_epoch=start, optimizer=opt)
    assert prior + rest == full
    assert c.store.to_bytes() == a.store.to_bytes()


def test_save_load_round_trip(tmp_path):
    world, system = build()
    system.save(str(tmp_path), header="# h\n")
    back = ConceptSystem.load(str(tmp_path))
    assert back.graph.serialize() == system.graph.serialize()
    assert back.store.to_bytes() == system.store.to_bytes()
    np.testing.assert_array_equal(back.predict(world.splits["val"]), system.predict(world.splits["val"]))


def test_non_finite_loss_raises():
    world, system = build()
    for name in system.store.names("clf."):
        system.store[name].data[:] = np.nan
    with pytest.raises(NumericalError):
        train_base(system, world.base_split("train"), TCFG)


def test_false_detection_keeps_labels(rng):
    world, system = build()
    perturb = false_detections(system.graph, 1.0)
    for b in world.base_split("train"):
        p = perturb(b, rng)
        assert p.labels == b.labels and set(b.detections) <= set(p.detections)
        extra = set(p.detections) - set(b.detections)
        assert len(extra) <= 1 and not extra & set(b.labels)


def test_remove_concept_restores_shape():
    world, system = build()
    before = system.predict(world.splits["val"])
    system.add_node("tmp", "object", np.zeros(5))
    system.extend_classifier(np.random.default_rng(0))
    system.remove_concept("tmp")
    np.testing.assert_array_equal(system.predict(world.splits["val"]), before)
