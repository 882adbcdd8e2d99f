import numpy as np
import pytest

from parafuse.data import (LANGUAGES, TaskSpec, generate_dataset, label_name, load_dataset, prototype_accuracy,
                           render_text, save_dataset, split_validation)


@pytest.fixture(scope="module")
def task():
    return TaskSpec()


def test_same_seed_bit_identical(task):
    a, b = generate_dataset(3, 20, task=task), generate_dataset(3, 20, task=task)
    for x, y in zip(a, b):
        assert x.tokens == y.tokens and x.lang == y.lang
        assert np.array_equal(x.view_w, y.view_w) and np.array_equal(x.view_m, y.view_m)


def test_invalid_sizes(task):
    with pytest.raises(ValueError):
        generate_dataset(0, 0, task=task)
    with pytest.raises(ValueError, match="langs"):
        generate_dataset(0, 3, langs=[], task=task)
    with pytest.raises(ValueError, match="unknown"):
        generate_dataset(0, 3, langs=["xx"], task=task)


def test_shapes_and_lengths(task):
    for u in generate_dataset(1, 50, task=task):
        assert 3 <= len(u.tokens) <= 12
        t_m = task.frames_per_token * len(u.tokens) + 1
        assert u.view_m.shape == (t_m, task.d_raw)
        assert u.view_w.shape == (round(t_m * 1.25), task.d_raw)
        assert u.duration_s == u.view_w.shape[0] * task.frame_seconds > 0
        assert u.lang in LANGUAGES


def test_complementarity(task):
    data = generate_dataset(2, 200, task=task)
    chance = 1 / task.n_labels
    w, m, both = (prototype_accuracy(data, task, v) for v in ("w", "m", "wm"))
    assert w <= 2 * chance and m <= 2 * chance
    assert both >= 0.99
    assert both - w >= 0.30


def test_each_view_carries_one_half(task):
    # labels sharing the high half are indistinguishable from view_w alone
    u = generate_dataset(4, 1, task=task)[0]
    for j, lab in enumerate(u.tokens):
        hi, lo = task.split(lab)
        seg_w = u.view_w[2 * j:2 * j + 2].mean(axis=0)
        seg_m = u.view_m[2 * j:2 * j + 2].mean(axis=0)
        assert np.argmin(((task.prototypes_w - seg_w) ** 2).sum(axis=1)) == hi
        assert np.argmin(((task.prototypes_m - seg_m) ** 2).sum(axis=1)) == lo


def test_roundtrip(tmp_path, task):
    data = generate_dataset(5, 7, task=task)
    save_dataset(data, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    for x, y in zip(data, back):
        assert (x.utt_id, x.tokens, x.lang, x.duration_s) == (y.utt_id, y.tokens, y.lang, y.duration_s)
        assert np.array_equal(x.view_w, y.view_w) and np.array_equal(x.view_m, y.view_m)


def test_rendering():
    assert label_name(0) == "ka" and label_name(6) == "se"
    assert render_text([0, 1, 2], "en") == "ka ke ki"
    assert render_text([0, 1, 2], "ja") == "kakeki"


def test_task_label_count_must_split():
    with pytest.raises(ValueError):
        TaskSpec(n_labels=8)
    assert TaskSpec(n_labels=16).half_size == 4


def test_validation_split(task):
    data = generate_dataset(6, 100, task=task)
    train, valid = split_validation(data, 0.05, seed=0)
    assert len(valid) == 5 and len(train) == 95
    assert not {u.utt_id for u in train} & {u.utt_id for u in valid}
    assert [u.utt_id for u in split_validation(data, 0.05, seed=0)[1]] == [u.utt_id for u in valid]
