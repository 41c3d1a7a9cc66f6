import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tara.chsh import summarize
from tara.config import to_dict
from tara.datagen import ConfigError, GeneratorConfig, generate
from tara.dataio import (DatasetParseError, config_from_json, config_to_json, iter_records, parse_dataset,
                         read_calibration, read_config, read_dataset, read_envelope, read_hardware_csv,
                         write_calibration, write_config, write_dataset, write_envelope)
from tara.experiments import build_calibration
from tara.tara_k import fit_envelope


def test_round_trip_ten_thousand_records(tmp_path):
    ds = generate(GeneratorConfig("lhv-detection", 2500, seed=1, eta=0.8))
    path = tmp_path / "d.csv"
    write_dataset(path, ds, metadata={"note": "x"})
    back = read_dataset(path)
    assert len(back) == 10_000
    assert back == ds
    assert back.metadata["note"] == "x"


def test_write_is_byte_stable(tmp_path):
    ds = generate(GeneratorConfig("lhv-mixture", 50, seed=2))
    write_dataset(tmp_path / "a.csv", ds)
    write_dataset(tmp_path / "b.csv", ds)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_bad_row_reports_line_number():
    lines = ["# tara-dataset v1", "# label: \"quantum\"", "trial,x,z,a,b",
             "0,0,0,1,1", "1,0,1,1,1", "2,1,0,1,1", "5,2,0,1,1"]
    with pytest.raises(DatasetParseError, match="x out of range, line 7") as err:
        parse_dataset(lines)
    assert err.value.line == 7


@pytest.mark.parametrize("row, message", [
    ("0,0,0,2,1", "a out of range"),
    ("0,0,0,1,-2", "b out of range"),
    ("0,0,0,1", "expected 5 fields"),
    ("0,0,q,1,1", "z is not an integer"),
])
def test_malformed_rows(row, message):
    with pytest.raises(DatasetParseError, match=message):
        parse_dataset(["trial,x,z,a,b", row])


def test_header_and_ordering_errors():
    with pytest.raises(DatasetParseError, match="expected header"):
        parse_dataset(["x,z,a,b", "0,0,1,1"])
    with pytest.raises(DatasetParseError, match="strictly increasing, line 3"):
        parse_dataset(["trial,x,z,a,b", "4,0,0,1,1", "4,0,1,1,1"])
    with pytest.raises(DatasetParseError, match="missing header"):
        parse_dataset([])


def test_iter_records_is_lazy():
    def lines():
        yield "trial,x,z,a,b"
        yield "0,0,0,1,1"
        yield "1,9,9,9,9"

    it = iter_records(lines())
    first = next(it)
    assert (first.x, first.a) == (0, 1)
    with pytest.raises(DatasetParseError):
        next(it)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.sampled_from([-1, 0, 1]),
                          st.sampled_from([-1, 0, 1])), min_size=1, max_size=40))
def test_parse_write_round_trip_property(rows):
    text = ["trial,x,z,a,b"] + [f"{i},{x},{z},{a},{b}" for i, (x, z, a, b) in enumerate(rows)]
    ds = parse_dataset(text)
    assert [(r.x, r.z, r.a, r.b) for r in ds] == rows


def test_hardware_csv_with_counts_and_bit_outcomes(tmp_path):
    src = tmp_path / "hw.csv"
    src.write_text("setting_a,setting_b,out_a,out_b,shots\n"
                   "0,0,0,0,3\n0,1,1,1,2\n1,0,0,1,1\n1,1,1,0,4\n")
    mapping = {"columns": {"x": "setting_a", "z": "setting_b", "a": "out_a", "b": "out_b", "count": "shots"},
               "values": {"a": {"0": 1, "1": -1}, "b": {"0": 1, "1": -1}}}
    sidecar = tmp_path / "map.json"
    sidecar.write_text(json.dumps(mapping))
    ds = read_hardware_csv(src, sidecar)
    assert len(ds) == 10
    summ = summarize(ds)
    # Only both-click rows: every trial is a coincidence.
    assert summ.click_rates[3] == 0.0
    assert summ.click_rates[2] == 1.0
    assert summ.correlators == (1.0, 1.0, -1.0, -1.0)


def test_hardware_mapping_errors(tmp_path):
    src = tmp_path / "hw.csv"
    src.write_text("x,z,a,b\n0,0,1,1\n0,0,7,1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        read_hardware_csv(src, {"cols": {}})
    with pytest.raises(DatasetParseError, match="a out of range, line 3"):
        read_hardware_csv(src)
    with pytest.raises(DatasetParseError, match="missing column"):
        read_hardware_csv(src, {"columns": {"x": "alice"}})


def test_calibration_and_envelope_round_trip_exactly(tmp_path):
    art = build_calibration(generate(GeneratorConfig("lhv-mixture", 400, seed=3)))
    write_calibration(tmp_path / "c1.json", art.model, art.cal, art.reference_pvalues)
    model, cal, ref = read_calibration(tmp_path / "c1.json")
    assert np.array_equal(model.tables, art.model.tables)
    assert all(np.array_equal(a, b) for a, b in zip(cal.scores, art.cal.scores))
    assert np.array_equal(ref, art.reference_pvalues)
    write_calibration(tmp_path / "c2.json", model, cal, ref)
    assert (tmp_path / "c1.json").read_bytes() == (tmp_path / "c2.json").read_bytes()

    env = fit_envelope(np.random.default_rng(0).normal(size=(100, 7)))
    write_envelope(tmp_path / "e1.json", env)
    back = read_envelope(tmp_path / "e1.json")
    x = np.random.default_rng(1).normal(size=(20, 7))
    assert np.array_equal(back.score(x), env.score(x))
    assert back.threshold == env.threshold
    write_envelope(tmp_path / "e2.json", back)
    assert (tmp_path / "e1.json").read_bytes() == (tmp_path / "e2.json").read_bytes()


def test_wrong_schema_rejected(tmp_path):
    (tmp_path / "x.json").write_text('{"schema": "other", "version": 1}')
    with pytest.raises(ConfigError):
        read_calibration(tmp_path / "x.json")


# -- configs ---------------------------------------------------------------------

def test_minimal_generator_config_round_trip(tmp_path):
    cfg = config_from_json('{"model": "quantum-singlet", "trials_per_context": 10, "seed": 4}', "generator")
    assert cfg == GeneratorConfig("quantum-singlet", 10, seed=4)
    write_config(tmp_path / "g.json", cfg)
    assert read_config(tmp_path / "g.json", "generator") == cfg


def test_config_errors():
    with pytest.raises(ConfigError, match="seed required"):
        config_from_json('{"model": "pr-box", "trials_per_context": 10}', "generator")
    with pytest.raises(ConfigError, match="unknown key 'colour'"):
        config_from_json('{"model": "pr-box", "trials_per_context": 1, "seed": 0, "colour": 1}', "generator")
    with pytest.raises(ConfigError, match="expected an integer"):
        config_from_json('{"model": "pr-box", "trials_per_context": "ten", "seed": 0}', "generator")
    with pytest.raises(ConfigError, match="expected 'leakage'"):
        config_from_json('{"kind": "ablation"}', "leakage")


@pytest.mark.parametrize("name, kind", [("ablation_default.json", "ablation"), ("leakage_default.json", "leakage")])
def test_packaged_configs_round_trip(name, kind):
    cfg = read_config(f"src/tara/configs/{name}", kind)
    assert config_from_json(config_to_json(cfg), kind) == cfg


def test_metadata_echo_matches_generating_config(tmp_path):
    cfg = GeneratorConfig("lhv-memory", 20, seed=9, memory_order=2, bias=0.9)
    write_config(tmp_path / "g.json", cfg)
    ds = generate(read_config(tmp_path / "g.json", "generator"))
    write_dataset(tmp_path / "d.csv", ds, metadata={"generator": to_dict(cfg)})
    echoed = read_dataset(tmp_path / "d.csv").metadata["generator"]
    assert config_from_json(json.dumps(echoed), "generator") == cfg
