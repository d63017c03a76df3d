
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msc_tta.core import ConfigError
from msc_tta.learner import ModelSnapshot, TrainingConfig
from msc_tta.scenarios import (
    CellPartition,
    Context,
    PartitionKind,
    PretrainSpec,
    build_pretraining_set,
    cell_epochs,
    cell_of,
    fit_epochs,
    pretrain,
)


@pytest.mark.parametrize("kind,n", [("Baseline", 12), ("Common", 1), ("Spatial", 7),
                                    ("Weather", 3), ("Daylight", 2), ("Specific", 42)])
def test_cell_counts(kind, n):
    assert CellPartition(kind).n_cells == n


def test_specific_cell_example():
    # zone 3, rain, night
    assert cell_of(CellPartition("Specific"), Context(0, 3, 1, 1)) == 21


@given(st.integers(0, 11), st.integers(0, 6), st.integers(0, 2), st.integers(0, 1))
def test_cells_in_range_and_specific_is_a_bijection(agent, zone, wk, dl):
    ctx = Context(agent, zone, wk, dl)
    for kind in PartitionKind:
        p = CellPartition(kind)
        assert 0 <= cell_of(p, ctx) < p.n_cells
    c = cell_of(CellPartition("Specific"), ctx)
    assert (c // 6, (c % 6) // 2, c % 2) == (zone, wk, dl)


def test_single_cell_partitions():
    ctx = Context(5, 4, 2, 1)
    assert cell_of(CellPartition("Common"), ctx) == 0
    assert cell_of(CellPartition("Baseline"), ctx) == 5
    assert cell_of(CellPartition("Weather"), ctx) == 2
    assert cell_of(CellPartition("Daylight"), ctx) == 1


def test_cell_epochs_balance_backward_passes():
    # 3 cells, 900 samples: a 100-sample cell gets 3*900/(3*100) = 9 epochs
    assert cell_epochs(3, 900, 3, 100) == 9
    assert cell_epochs(3, 900, 3, 600) == 2  # 1.5 rounds half up
    assert cell_epochs(3, 10_000, 2, 9_999) == 2
    assert cell_epochs(1, 100, 1, 100_000) == 1


def test_split_is_stable_and_close_to_ninety_percent(small_world):
    p = CellPartition.for_world("Spatial", small_world)
    a = build_pretraining_set(small_world, p, 600)
    b = build_pretraining_set(small_world, p, 600)
    n_train = sum(map(len, a.train.values()))
    assert n_train == sum(map(len, b.train.values()))
    assert 0.85 < n_train / a.total < 0.95
    for cell, items in a.train.items():
        assert [s.time for s, _ in items] == [s.time for s, _ in b.train[cell]]


def test_pretraining_buckets_follow_partition(small_world):
    p = CellPartition.for_world("Baseline", small_world)
    sets = build_pretraining_set(small_world, p, 300)
    for cell, items in list(sets.train.items()) + list(sets.val.items()):
        assert all(s.agent == cell for s, _ in items)


def test_scratch_is_all_zero():
    models = pretrain(PretrainSpec("Scratch"), None, TrainingConfig(), CellPartition("Spatial"), 6, 16)
    assert len(models) == 7
    assert all(not m.W.any() and not m.b.any() and m.version == 0 for m in models.values())


def test_general_shares_one_model(small_world):
    p = CellPartition.for_world("Spatial", small_world)
    sets = build_pretraining_set(small_world, p, 300)
    models = pretrain(PretrainSpec("General"), sets, TrainingConfig(), p, 6, 16)
    first = models[0]
    assert all(m.same_weights(first) for m in models.values())
    assert first.W.any()


def test_cell_mode_trains_each_nonempty_cell(small_world):
    p = CellPartition.for_world("Spatial", small_world)
    sets = build_pretraining_set(small_world, p, 300)
    models = pretrain(PretrainSpec("Cell"), sets, TrainingConfig(), p, 6, 16)
    trained = sorted(c for c, v in sets.train.items() if v)
    empty = [c for c in range(7) if c not in trained]
    assert len(models) == 7 and len(trained) >= 2
    assert not models[trained[0]].same_weights(models[trained[1]])
    general = pretrain(PretrainSpec("General"), sets, TrainingConfig(), p, 6, 16)[0]
    for c in empty:
        assert models[c].same_weights(general)


def test_empty_pool_is_config_error():
    from msc_tta.scenarios import PretrainingSets
    with pytest.raises(ConfigError):
        pretrain(PretrainSpec("General"), PretrainingSets(), TrainingConfig(), CellPartition("Common"), 6, 16)


def test_fit_epochs_picks_best_validation_epoch():
    rng = np.random.default_rng(0)
    from conftest import make_sample
    train = [(s, s.truth) for s in (make_sample(rng, t=i) for i in range(50))]
    val = [(s, s.truth) for s in (make_sample(rng, t=100 + i) for i in range(10))]
    model, steps, best = fit_epochs(ModelSnapshot.zeros(3, 4), train, TrainingConfig(), 3, val, shuffle_seed=1)
    assert steps == 6 and 1 <= best <= 3 and model.version == 0


def test_invalid_pretrain_spec():
    with pytest.raises(ConfigError):
        PretrainSpec(split=1.0)
