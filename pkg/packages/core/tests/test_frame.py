"""Tests for the frame data model, g functions and CSV ingestion."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from massfuse.designs import SRSWOR, Stratum, StratifiedSRSWOR
from massfuse.errors import EmptyFrameError, ParseError, SchemaError
from massfuse.frame import (
    BigSample,
    Frame,
    FrameSchema,
    Identity,
    Indicator,
    ProbabilitySample,
    Product,
    UnitRecord,
    apply_g,
    g_label,
    g_values,
    parse_g,
    read_big_sample_csv,
    read_frame_csv,
    read_sample_csv,
    write_frame_csv,
)


def _write(tmp_path: Path, text: str, name: str = "data.csv") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


_SCHEMA = FrameSchema(covariates=["x1"], outcomes=["y1"])


class TestFrame:
    def test_records_view(self, make_frame):
        frame = make_frame([1.0, 3.0], [2.0, 4.0])
        records = frame.records
        assert records == [UnitRecord(0, (1.0,), (2.0,)), UnitRecord(1, (3.0,), (4.0,))]
        assert frame.n_rows == 2

    def test_arrays_are_read_only(self, make_frame):
        frame = make_frame([1.0, 3.0], [2.0, 4.0])
        with pytest.raises(ValueError):
            frame.x[0, 0] = 5.0

    def test_duplicate_ids_rejected(self):
        with pytest.raises(SchemaError, match="unique"):
            Frame(ids=[1, 1], x=[[0.0], [1.0]], y=[[0.0], [1.0]], covariate_names=("x",), outcome_names=("y",))

    def test_missing_covariate_rejected(self, make_frame):
        with pytest.raises(SchemaError, match="fully observed"):
            make_frame([1.0, np.nan])

    def test_binary_column_checked(self, make_frame):
        with pytest.raises(SchemaError, match="only 0 or 1"):
            make_frame([1.0, 2.0], [0.0, 0.5], binary_outcomes=frozenset({"y1"}))

    def test_take_keeps_order_and_flags(self, make_frame):
        frame = make_frame([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], delta_b=[True, False, True])
        sub = frame.take(np.array([2, 0]))
        assert sub.ids.tolist() == [2, 0]
        assert sub.delta_b.tolist() == [True, True]

    def test_unknown_covariate(self, make_frame):
        with pytest.raises(SchemaError, match="unknown covariate"):
            make_frame([1.0]).covariate_index("z")


class TestSamples:
    def test_probability_sample_weights(self, make_frame, srs_sample):
        sample = srs_sample(make_frame([1.0, 2.0]), 10)
        assert sample.weights.tolist() == [5.0, 5.0]

    def test_pi_must_match_design(self, make_frame):
        with pytest.raises(SchemaError, match="disagrees"):
            ProbabilitySample(
                frame=make_frame([1.0, 2.0]),
                pi=[0.25, 0.25],
                design=SRSWOR(N=10, n=2),
                population_size=10,
                unit_index=[0, 1],
            )

    def test_pi_range(self, make_frame):
        with pytest.raises(SchemaError, match=r"\(0, 1\]"):
            ProbabilitySample(
                frame=make_frame([1.0]),
                pi=[0.0],
                design=SRSWOR(N=10, n=1),
                population_size=10,
                unit_index=[0],
            )

    def test_big_sample_needs_outcomes(self, make_frame):
        with pytest.raises(SchemaError, match="outcome"):
            BigSample(frame=make_frame([1.0, 2.0]))


class TestGFunctions:
    def test_identity(self):
        assert apply_g(Identity(0), UnitRecord(0, (0.0,), (3.5, 1.0))) == 3.5

    def test_indicator(self):
        assert apply_g(Indicator(0, 2.0), UnitRecord(0, (0.0,), (1.9, 0.0))) == 1.0
        assert apply_g(Indicator(0, 2.0), UnitRecord(0, (0.0,), (2.0, 0.0))) == 0.0

    def test_product(self):
        assert apply_g(Product(0, 1), UnitRecord(0, (0.0,), (3.5, 1.0))) == 3.5

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            apply_g(Identity(2), UnitRecord(0, (0.0,), (3.5, 1.0)))

    def test_indicator_is_binary(self, rng):
        y = rng.normal(size=(500, 1)) * 10
        values = g_values(Indicator(0, 0.3), y)
        assert set(np.unique(values)) <= {0.0, 1.0}

    def test_vectorised_matches_scalar(self, rng, make_frame):
        frame = make_frame(rng.normal(size=20), rng.normal(size=(20, 2)))
        for g in (Identity(1), Indicator(0, 0.0), Product(0, 1)):
            expected = [apply_g(g, r) for r in frame.records]
            assert g_values(g, frame).tolist() == pytest.approx(expected)

    def test_parse(self):
        names = ["y1", "y2"]
        assert parse_g("y2", names) == Identity(1)
        assert parse_g("identity:y1", names) == Identity(0)
        assert parse_g("indicator:y1<2.5", names) == Indicator(0, 2.5)
        assert parse_g("product:y1*y2", names) == Product(0, 1)

    def test_parse_unknown_outcome(self):
        with pytest.raises(ValueError, match="unknown outcome"):
            parse_g("identity:y9", ["y1"])

    def test_label(self):
        assert g_label(Indicator(0, 2.0), ["sales"]) == "I(sales<2)"
        assert g_label(Product(0, 1), ["y1", "y2"]) == "y1*y2"


class TestSchema:
    def test_needs_covariate(self):
        with pytest.raises(ValueError):
            FrameSchema(covariates=[])

    def test_binary_must_be_outcome(self):
        with pytest.raises(ValueError):
            FrameSchema(covariates=["x"], outcomes=["y"], binary_outcomes=["z"])

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            FrameSchema(covariates=["x"], weights="w")


class TestReadCsv:
    def test_two_rows(self, tmp_path):
        path = _write(tmp_path, "id,x1,y1\n0,1.0,2.0\n1,3.0,4.0\n")
        frame = read_frame_csv(path, _SCHEMA)
        assert frame.n_rows == 2
        assert frame.x[:, 0].tolist() == [1.0, 3.0]
        assert frame.y[:, 0].tolist() == [2.0, 4.0]

    def test_without_id_column(self, tmp_path):
        path = _write(tmp_path, "x1,y1\n1.0,2.0\n3.0,4.0\n")
        frame = read_frame_csv(path, FrameSchema(id_column=None, covariates=["x1"], outcomes=["y1"]))
        assert frame.ids.tolist() == [0, 1]

    def test_empty_data_section(self, tmp_path):
        path = _write(tmp_path, "id,x1,y1\n")
        with pytest.raises(EmptyFrameError):
            read_frame_csv(path, _SCHEMA)

    def test_non_numeric_cell(self, tmp_path):
        path = _write(tmp_path, "id,x1,y1\n0,abc,2.0\n1,3.0,4.0\n")
        with pytest.raises(ParseError) as excinfo:
            read_frame_csv(path, _SCHEMA)
        assert excinfo.value.row == 1
        assert excinfo.value.column == "x1"

    def test_missing_column(self, tmp_path):
        path = _write(tmp_path, "id,x1\n0,1.0\n")
        with pytest.raises(SchemaError, match="y1"):
            read_frame_csv(path, _SCHEMA)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_frame_csv(tmp_path / "nope.csv", _SCHEMA)

    def test_delta_b_must_be_flag(self, tmp_path):
        path = _write(tmp_path, "id,x1,y1,delta_b\n0,1.0,2.0,2\n")
        with pytest.raises(ParseError) as excinfo:
            read_frame_csv(path, FrameSchema(covariates=["x1"], outcomes=["y1"], delta_b_column="delta_b"))
        assert excinfo.value.column == "delta_b"

    def test_round_trip_is_byte_identical(self, tmp_path):
        text = "id,x1,y1,delta_b\n0,1.0,2.0,1\n1,3.0,4.5,0\n2,-0.25,1e-05,1\n"
        source = _write(tmp_path, text)
        schema = FrameSchema(covariates=["x1"], outcomes=["y1"], delta_b_column="delta_b")
        out = write_frame_csv(read_frame_csv(source, schema), tmp_path / "out.csv")
        assert out.read_bytes() == source.read_bytes()

    def test_sample_csv_defaults_to_srswor(self, tmp_path):
        path = _write(tmp_path, "id,x1,pi\n3,1.0,0.2\n8,2.0,0.2\n")
        sample = read_sample_csv(path, FrameSchema(covariates=["x1"], pi_column="pi"), population_size=10)
        assert sample.design == SRSWOR(N=10, n=2)
        assert sample.weights.tolist() == pytest.approx([5.0, 5.0])

    def test_sample_csv_stratified(self, tmp_path):
        path = _write(tmp_path, "id,x1,pi,stratum\n0,1.0,0.5,2\n1,2.0,0.25,1\n2,3.0,0.5,2\n")
        design = StratifiedSRSWOR((Stratum(1, 4, 1), Stratum(2, 4, 2)))
        schema = FrameSchema(covariates=["x1"], pi_column="pi", stratum_column="stratum")
        sample = read_sample_csv(path, schema, population_size=8, design=design)
        assert sample.unit_index.tolist() == [4, 0, 5]

    def test_sample_csv_needs_pi(self, tmp_path):
        path = _write(tmp_path, "id,x1\n0,1.0\n")
        with pytest.raises(SchemaError, match="pi"):
            read_sample_csv(path, FrameSchema(covariates=["x1"]), population_size=10)

    def test_big_sample_csv(self, tmp_path):
        path = _write(tmp_path, "id,x1,y1\n0,1.0,2.0\n")
        assert read_big_sample_csv(path, _SCHEMA).n == 1
