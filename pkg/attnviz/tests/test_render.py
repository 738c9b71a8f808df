import copy
import json

import pytest

from attnviz.cli import main
from attnviz.render import TraceValidationError, format_weight, render, validate_trace


def make_trace(turns=2, steps=2, regions=4, snippets=3):
    doc = {"dialog_id": 1000, "turns": []}
    for t in range(1, turns + 1):
        step_list = []
        for s in range(steps):
            beta = [round(1.0 / regions, 10)] * regions
            beta[0] += 1.0 - sum(beta)
            gamma = [0.7] + [0.3 / (snippets - 1)] * (snippets - 1)
            step_list.append({"beta": beta, "gamma": gamma})
        doc["turns"].append({
            "turn": t,
            "question": f"what color is the cat {t}",
            "steps": step_list,
            "top_candidates": [
                {"text": "red", "score": 1.5, "rank": 1},
                {"text": "blue", "score": 0.5, "rank": 2},
            ],
        })
    return doc


@pytest.fixture
def trace_file(tmp_path):
    path = tmp_path / "trace.json"
    path.write_text(json.dumps(make_trace()))
    return path


def test_render_expected_file_count(trace_file, tmp_path):
    out = tmp_path / "figs"
    written = render(trace_file, out, dpi=60)
    # turns x (steps + 1 grid)
    assert len(written) == 2 * (2 + 1)
    names = sorted(p.split("/")[-1] for p in written)
    assert names == sorted(["1000_1_1.png", "1000_1_2.png", "1000_1_grid.png",
                            "1000_2_1.png", "1000_2_2.png", "1000_2_grid.png"])


def test_render_does_not_mutate_trace(trace_file, tmp_path):
    before = trace_file.read_bytes()
    render(trace_file, tmp_path / "f", dpi=50)
    assert trace_file.read_bytes() == before


def test_render_is_byte_deterministic(trace_file, tmp_path):
    a = render(trace_file, tmp_path / "a", dpi=60)
    b = render(trace_file, tmp_path / "b", dpi=60)
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read()


def test_annotations_round_trip_at_three_decimals():
    values = [0.0, 1.0, 0.3333333, 0.0004999, 0.98765]
    for v in values:
        assert float(format_weight(v)) == round(v, 3)


def test_annotation_texts_match_weights(trace_file, tmp_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from attnviz.render import _draw_step

    doc = json.loads(trace_file.read_text())
    step = doc["turns"][0]["steps"][0]
    fig, (ax1, ax2) = plt.subplots(2, 1)
    _draw_step(ax1, ax2, step, "t")
    strip_texts = [t.get_text() for t in ax1.texts]
    bar_texts = [t.get_text() for t in ax2.texts]
    assert strip_texts == [format_weight(v) for v in step["beta"]]
    assert bar_texts == [format_weight(v) for v in step["gamma"]]
    plt.close(fig)


def test_validate_rejects_bad_sum():
    doc = make_trace()
    doc["turns"][0]["steps"][1]["beta"] = [0.2, 0.2, 0.2, 0.2]
    with pytest.raises(TraceValidationError) as exc:
        validate_trace(doc)
    assert exc.value.path == "$.turns[0].steps[1].beta"


def test_validate_rejects_negative_weight():
    doc = make_trace()
    doc["turns"][1]["steps"][0]["gamma"] = [1.2, -0.1, -0.1]
    with pytest.raises(TraceValidationError) as exc:
        validate_trace(doc)
    assert exc.value.path == "$.turns[1].steps[0].gamma"


def test_validate_rejects_missing_field():
    doc = make_trace()
    del doc["turns"][0]["steps"][0]["gamma"]
    with pytest.raises(TraceValidationError) as exc:
        validate_trace(doc)
    assert "$.turns[0].steps[0]" in exc.value.path


def test_validate_accepts_good_trace():
    validate_trace(make_trace())


def test_cli_success_and_failure(trace_file, tmp_path, capsys):
    assert main(["--trace", str(trace_file), "--out", str(tmp_path / "o"),
                 "--dpi", "50"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["images"] == 6

    bad = copy.deepcopy(make_trace())
    bad["turns"][0]["steps"][0]["beta"] = [0.9, 0.9, 0.9, 0.9]
    bad_path = tmp_path / "bad.json"
    bad_path.write_text(json.dumps(bad))
    assert main(["--trace", str(bad_path), "--out", str(tmp_path / "o2")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["path"] == "$.turns[0].steps[0].beta"
    assert main(["--trace", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o3")]) == 2
