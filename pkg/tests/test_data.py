import numpy as np
import pytest

from globalwin import DataError, EndpointSpec, TrialDataset, apply_directions
from globalwin.data import Direction, Schema, anova_icc, load_trial_tsv, summarize
from globalwin.errors import InputError

SCHEMA = Schema("arm", "school", "idno", ("kscore", "debut"))
SPECS = (EndpointSpec("knowledge", "higher_is_better", 0.7),
         EndpointSpec("activity", "lower_is_better", 0.3))


def _dataset(**kw):
    base = dict(
        endpoints=(EndpointSpec("y"),),
        arm=[0, 0, 1, 1],
        cluster=["a", "a", "b", "b"],
        individual=["1", "2", "1", "2"],
        values=[1.0, 2.0, 3.0, 4.0],
    )
    base.update(kw)
    return TrialDataset(**base)


def test_load_drops_incomplete_rows(data_dir):
    d, rep = load_trial_tsv(data_dir / "toy_trial.tsv", SCHEMA, SPECS)
    assert rep.row_count_total == 123
    assert rep.row_count_dropped == 3
    assert [line for line, _ in rep.issues] == [6, 18, 24]
    assert "kscore" in rep.issues[0][1]
    assert d.N == rep.row_count_kept == sum(rep.arm_totals.values())
    assert sum(rep.cluster_summary.values()) == d.N
    assert d.n_clusters(0) == 5 and d.n_clusters(1) == 5


def test_arrays_are_frozen():
    d = _dataset()
    with pytest.raises(ValueError):
        d.values[0, 0] = 9.0


@pytest.mark.parametrize("kw, msg", [
    (dict(cluster=["a", "a", "a", "b"]), "both arms"),
    (dict(arm=[0, 0, 0, 0]), "treatment arm has no clusters"),
    (dict(arm=[0, 0, 2, 2]), "0 .control. or 1"),
    (dict(individual=["1", "1", "1", "2"]), "duplicate"),
    (dict(values=[1.0, np.nan, 3.0, 4.0]), "finite"),
    (dict(endpoints=(EndpointSpec("y", weight=0.0),)), "positive weight"),
])
def test_invariants_rejected(kw, msg):
    with pytest.raises(DataError, match=msg):
        _dataset(**kw)


def test_negative_weight_rejected():
    with pytest.raises(DataError):
        EndpointSpec("y", weight=-1.0)


def test_direction_aliases():
    assert Direction.parse("lower") is Direction.LOWER_IS_BETTER
    assert Direction.parse("+") is Direction.HIGHER_IS_BETTER
    with pytest.raises(DataError):
        Direction.parse("sideways")


def test_apply_directions_negates_and_is_idempotent():
    d = _dataset(endpoints=(EndpointSpec("y", "lower_is_better"),), values=[0.0, 2.0, 3.0, 4.0])
    f = apply_directions(d)
    assert np.array_equal(f.values[:, 0], [0.0, -2.0, -3.0, -4.0])
    assert not np.signbit(f.values[0, 0])
    assert apply_directions(f) is f


def test_mirrored_swaps_arms():
    d = _dataset()
    assert np.array_equal(d.mirrored().arm, 1 - d.arm)


def test_bad_tokens(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("arm\tschool\tidno\tkscore\tdebut\n0\ts1\t1\tabc\t1\n")
    with pytest.raises(DataError, match="line 2: non-numeric"):
        load_trial_tsv(p, SCHEMA, SPECS)
    p.write_text("arm\tschool\tidno\tkscore\tdebut\n7\ts1\t1\t1\t1\n")
    with pytest.raises(DataError, match="arm value"):
        load_trial_tsv(p, SCHEMA, SPECS)
    p.write_text("arm\tschool\tidno\tkscore\n0\ts1\t1\t1\n")
    with pytest.raises(DataError, match="debut"):
        load_trial_tsv(p, SCHEMA, SPECS)
    with pytest.raises(InputError):
        load_trial_tsv(tmp_path / "missing.tsv", SCHEMA, SPECS)


def test_arm_label_mapping(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("g\tc\ti\ty\nctl\tc1\t1\t1\nctl\tc1\t2\t2\ntrt\tc2\t1\t3\n")
    d, _ = load_trial_tsv(p, Schema("g", "c", "i", ("y",), {"ctl": 0, "trt": 1}),
                          (EndpointSpec("y"),))
    assert d.arm.tolist() == [0, 0, 1]


def test_summary_matches_direct_computation(data_dir):
    d, _ = load_trial_tsv(data_dir / "toy_trial.tsv", SCHEMA, SPECS)
    s = summarize(d)
    x = d.values[d.arm == 1, 0]
    assert s.mean[1, 0] == pytest.approx(x.mean(), abs=1e-14)
    assert s.sd[1, 0] == pytest.approx(x.std(ddof=1), abs=1e-14)
    assert s.correlation[0, 1] == pytest.approx(np.corrcoef(d.values.T)[0, 1], abs=1e-14)


def test_anova_icc_balanced_closed_form():
    # two clusters per arm, three members; hand-computed moment ICC
    y = np.array([1, 2, 3, 4, 5, 6, 2, 2, 2, 6, 7, 8], dtype=float)
    arm = np.repeat([0, 0, 1, 1], 3)
    codes = np.repeat(np.arange(4), 3)
    # arm-centred cluster means: -1.5, 1.5, -2.5, 2.5 -> MSB = 3*(2.25*2+6.25*2)/2
    msb = 3 * (2 * 2.25 + 2 * 6.25) / 2
    msw = (2 + 2 + 0 + 2) / 8
    assert anova_icc(y, arm, codes) == pytest.approx((msb - msw) / (msb + 2 * msw), abs=1e-14)
