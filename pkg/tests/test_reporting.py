"""CSV formatting, config hashing, and SVG chart tests."""

import csv
import io
import xml.etree.ElementTree as ET

import pytest

from linmix.exceptions import ConfigError
from linmix.reporting import (
    METRICS_FIELDS,
    config_hash,
    csv_text,
    format_config,
    line_chart_svg,
    metrics_csv_text,
    write_csv,
    write_line_chart,
    write_resolved_config,
)


class TestConfigHash:
    def test_stable_under_key_order(self):
        a = config_hash({"n": 4, "d": 8})
        b = config_hash({"d": 8, "n": 4})
        assert a == b
        assert len(a) == 12
        int(a, 16)

    def test_sensitive_to_values(self):
        assert config_hash({"n": 4}) != config_hash({"n": 5})


class TestCsv:
    def test_comments_header_and_rows(self):
        text = csv_text(("a", "b"), [{"a": 1, "b": 2}, (3, 4)],
                        comments={"seed": 7, "config_hash": "deadbeef"})
        lines = text.splitlines()
        assert lines[0] == "# seed = 7"
        assert lines[1] == "# config_hash = deadbeef"
        assert lines[2] == "a,b"
        assert lines[3] == "1,2"
        assert lines[4] == "3,4"

    def test_none_becomes_empty_field(self):
        text = csv_text(("x", "y"), [{"x": None, "y": 1}])
        assert text.splitlines()[1] == ",1"

    def test_roundtrips_through_csv_reader(self, tmp_path):
        path = tmp_path / "rows.csv"
        write_csv(path, ("n", "t"), [(256, 0.5), (512, 1.0)],
                  comments={"seed": 0})
        with open(path, encoding="utf-8") as fh:
            data = [row for row in csv.reader(
                line for line in fh if not line.startswith("#"))]
        assert data == [["n", "t"], ["256", "0.5"], ["512", "1.0"]]

    def test_metrics_header(self):
        text = metrics_csv_text([(1, 0.5, 0.3, 0.1, 0.1)])
        assert text.splitlines()[0] == ",".join(METRICS_FIELDS)

    def test_resolved_config_format(self, tmp_path):
        cfg = {"seed": 3, "d": 8}
        assert format_config(cfg) == "d = 8\nseed = 3\n"
        path = tmp_path / "resolved.txt"
        write_resolved_config(path, cfg)
        assert path.read_text(encoding="utf-8") == "d = 8\nseed = 3\n"


class TestSvgChart:
    def test_chart_is_wellformed_with_one_polyline_per_series(self):
        series = {
            "linear": ([256, 512, 1024], [1e-4, 2e-4, 4e-4]),
            "softmax": ([256, 512, 1024], [1e-4, 4e-4, 1.6e-3]),
        }
        svg = line_chart_svg(series, "scaling", "tokens", "seconds")
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")
        polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
        assert len(polylines) == 2
        texts = [el.text for el in root.iter() if el.tag.endswith("text")]
        assert "scaling" in texts
        assert "tokens" in texts

    def test_rejects_bad_series(self):
        with pytest.raises(ConfigError):
            line_chart_svg({}, "t", "x", "y")
        with pytest.raises(ConfigError):
            line_chart_svg({"a": ([1, 2], [1.0])}, "t", "x", "y")
        with pytest.raises(ConfigError):
            line_chart_svg({"a": ([0, 2], [1.0, 2.0])}, "t", "x", "y")

    def test_linear_axes_accept_zero(self):
        svg = line_chart_svg({"a": ([0, 1, 2], [0.0, 1.0, 4.0])}, "t", "x",
                             "y", loglog=False)
        ET.fromstring(svg)

    def test_write_chart_file(self, tmp_path):
        path = tmp_path / "chart.svg"
        write_line_chart(path, {"a": ([1, 10], [1.0, 10.0])}, "t", "x", "y")
        ET.fromstring(path.read_text(encoding="utf-8"))
