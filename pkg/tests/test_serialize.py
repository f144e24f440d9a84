import json

import numpy as np
from hypothesis import given, settings, strategies as st

from persid import iohmm, lgss, serialize
from persid.domain import PerturbationSequence, group_dataset
from persid.seeding import rng_for


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip_exact(x):
    assert float(serialize.fmt_float(x)) == x
    assert json.loads(serialize.dumps([x]))[0] == x


def test_integral_floats_stay_floats():
    assert serialize.fmt_float(2.0) == "2.0"
    assert isinstance(json.loads(serialize.dumps({"a": 2.0}))["a"], float)


def test_dumps_is_plain_json():
    obj = {"b": [1, 2.5, True, None], "a": {"nested": np.array([0.1, 0.2])}, "s": "δ"}
    back = json.loads(serialize.dumps(obj))
    assert back == {"b": [1, 2.5, True, None], "a": {"nested": [0.1, 0.2]}, "s": "δ"}
    assert list(back) == ["b", "a", "s"]


def test_continuous_dataset_round_trip(tmp_path, osc_lgss):
    rng = rng_for(1)
    recs = []
    for i in range(3):
        u = PerturbationSequence(rng.standard_normal((7, 1)), policy_id=f"p{i % 2}", seed=100 + i)
        recs.append(lgss.simulate(osc_lgss, u, 200 + i, truth_tag="truth"))
    data = group_dataset(recs)
    serialize.write_dataset(tmp_path, data)
    back = serialize.read_dataset(tmp_path)
    assert back.groups == data.groups
    for a, b in zip(data.records, back.records):
        assert np.array_equal(a.inputs.values, b.inputs.values)
        assert np.array_equal(a.outputs, b.outputs)
        assert (a.seed, a.inputs.seed, a.inputs.policy_id, a.truth_tag) == (
            b.seed, b.inputs.seed, b.inputs.policy_id, b.truth_tag)


def test_discrete_dataset_round_trip(tmp_path):
    p = iohmm.random_params(2, 2, 3, rng_for(2))
    recs = [iohmm.simulate(p, PerturbationSequence([[0.0], [1.0], [1.0]]), s) for s in range(4)]
    data = group_dataset(recs)
    serialize.write_dataset(tmp_path, data)
    back = serialize.read_dataset(tmp_path)
    assert back.is_discrete and len(back.groups) == 1
    assert all(np.array_equal(a.outputs, b.outputs) for a, b in zip(data.records, back.records))


def test_record_csv_layout(tmp_path, scalar_lgss):
    rec = lgss.simulate(scalar_lgss, PerturbationSequence([[0.5], [1.0]]), 1)
    serialize.write_record_csv(tmp_path / "r.csv", rec)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "t,u_0,y_0"
    assert lines[1].startswith("0,0.5,")
    assert lines[3].startswith("2,,")
