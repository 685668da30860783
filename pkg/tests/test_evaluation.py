import json
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from spcyclegan.data import PairedSample
from spcyclegan.errors import ValidationError
from spcyclegan.evaluation import (
    ClassScore,
    MetricsRecord,
    compare_methods,
    evaluate,
    mean_and_se,
    write_comparison,
    write_metrics,
)


class LabelEcho(nn.Module):
    """Returns a probability map read from channels stashed in the image."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels

    def forward(self, x):
        lab = ((x[:, 0] + 1) * 127.5).round().long()
        if self.channels == 1:
            return (lab == 1).float()[:, None]
        return torch.nn.functional.one_hot(lab, self.channels).permute(0, 3, 1, 2).float()


def encode(label):
    """Image whose first channel encodes the label map, decoded by LabelEcho."""
    img = (label.astype(np.float32) / 127.5 - 1.0)[None]
    return img


def labelled(pred, truth, name="x"):
    return PairedSample(encode(pred), truth, name)


def test_perfect_segmenter_binary():
    rng = np.random.default_rng(0)
    data = [labelled(m, m, f"i{k}") for k, m in enumerate(rng.integers(0, 2, (6, 8, 8)))]
    rec = evaluate(LabelEcho(1), data, num_classes=1)
    assert list(rec.per_class_dsc) == [1]
    assert rec.per_class_dsc[1].mean == 1.0 and rec.per_class_dsc[1].se == 0.0
    assert rec.overall_mean_dsc == 1.0 and rec.overall_se == 0.0
    assert rec.per_class_dsc[1].n == 6


def test_perfect_segmenter_multiclass():
    rng = np.random.default_rng(1)
    data = [labelled(m, m) for m in rng.integers(0, 3, (4, 8, 8))]
    rec = evaluate(LabelEcho(3), data, num_classes=3, class_names={0: "background", 1: "LV", 2: "Myo"})
    assert sorted(rec.per_class_dsc) == [0, 1, 2]
    assert all(s.mean == 1.0 and s.se == 0.0 for s in rec.per_class_dsc.values())


def test_two_image_mean_and_se():
    t1 = np.array([[1, 0, 1, 1, 0], [0, 0, 0, 0, 0]])
    p1 = np.array([[1, 1, 0, 0, 0], [0, 0, 0, 0, 0]])  # 2*1 / (2 + 3) = 0.4
    t2 = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0]])
    p2 = np.array([[1, 1, 1, 0, 0], [0, 0, 0, 0, 0]])  # 2*3 / (3 + 7) = 0.6
    rec = evaluate(LabelEcho(1), [labelled(p1, t1, "a"), labelled(p2, t2, "b")])
    assert [r[1] for r in rec.per_image] == pytest.approx([0.4, 0.6])
    assert rec.overall_mean_dsc == pytest.approx(0.5)
    assert rec.overall_se == pytest.approx(0.1)
    assert rec.per_class_dsc[1].se == pytest.approx(0.1)


def test_mean_and_se_oracle():
    vals = [0.1, 0.5, 0.9, 0.3]
    m = sum(vals) / 4
    sd = math.sqrt(sum((v - m) ** 2 for v in vals) / 3)
    assert mean_and_se(vals) == pytest.approx((m, sd / 2))
    assert mean_and_se([0.7]) == (0.7, 0.0)
    with pytest.raises(ValidationError):
        mean_and_se([])


def test_multiclass_overall_is_mean_of_class_means():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 3, (5, 6, 6))
    noisy = np.where(rng.random(truth.shape) < 0.3, rng.integers(0, 3, truth.shape), truth)
    data = [labelled(p, t, f"i{k}") for k, (p, t) in enumerate(zip(noisy, truth))]
    rec = evaluate(LabelEcho(3), data, num_classes=3)
    assert rec.overall_mean_dsc == pytest.approx(np.mean([s.mean for s in rec.per_class_dsc.values()]))
    per_image = [r["overall"] for r in rec.per_image]
    assert rec.overall_se == pytest.approx(np.std(per_image, ddof=1) / math.sqrt(5))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_invariance_and_purity(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, (6, 5, 5))
    pred = rng.integers(0, 2, (6, 5, 5))
    data = [labelled(p, t, f"i{k}") for k, (p, t) in enumerate(zip(pred, truth))]
    a = evaluate(LabelEcho(1), data)
    b = evaluate(LabelEcho(1), [data[i] for i in rng.permutation(6)])
    c = evaluate(LabelEcho(1), data)
    assert a.to_dict() == c.to_dict()
    assert a.overall_mean_dsc == pytest.approx(b.overall_mean_dsc, abs=1e-12)
    assert a.overall_se == pytest.approx(b.overall_se, abs=1e-12)
    assert 0.0 <= a.overall_mean_dsc <= 1.0
    scores = [r[1] for r in a.per_image]
    assert (a.overall_se == 0) == (len(set(scores)) == 1)


def test_evaluate_errors():
    m = np.zeros((4, 4), np.int64)
    with pytest.raises(ValidationError):
        evaluate(LabelEcho(1), [])
    with pytest.raises(ValidationError):
        evaluate(LabelEcho(1), [PairedSample(encode(m), None, "u")])
    with pytest.raises(ValidationError):
        evaluate(LabelEcho(1), [labelled(m, m)], num_classes=3)
    with pytest.raises(ValidationError):
        evaluate(LabelEcho(1), [labelled(m, m + 2)])


def record(method, mean, se, direction="d", classes=(1,), n=10):
    per = {c: ClassScore(mean, se, n) for c in classes}
    return MetricsRecord(per, mean, se, method, direction, {1: "vessel"})


def test_compare_three_methods():
    rep = compare_methods([record("no_da", 0.3, 0.01), record("sp_cyclegan", 0.8, 0.01),
                           record("default_cyclegan", 0.7, 0.01)])
    assert [r["da_method"] for r in rep.rows] == ["sp_cyclegan", "default_cyclegan", "no_da"]
    assert rep.columns == ["Mean"]
    assert [r["cells"]["Mean"]["best"] for r in rep.rows] == [True, False, False]
    text = rep.to_text()
    assert "0.8000 ± 0.0100" in text and len([l for l in text.splitlines() if "cyclegan" in l or "no_da" in l]) == 3


def test_single_record_and_ties():
    rep = compare_methods([record("no_da", 0.5, 0.0)])
    assert len(rep.rows) == 1 and rep.rows[0]["cells"]["Mean"]["best"]
    rep = compare_methods([record("sp_cyclegan", 0.80, 0.03), record("default_cyclegan", 0.76, 0.02)])
    assert rep.rows[1]["cells"]["Mean"]["even_with_best"]
    assert "statistically even" in rep.rows[1]["notes"][0]
    assert "statistically even" in rep.to_text()


def test_compare_multiclass_columns():
    per = lambda m: {0: ClassScore(0.99, 0.0, 5), 1: ClassScore(m, 0.01, 5), 2: ClassScore(m - 0.1, 0.01, 5)}
    recs = [MetricsRecord(per(m), m, 0.01, meth, "mr2ct", {0: "background", 1: "LV", 2: "Myo"})
            for m, meth in [(0.8, "sp_cyclegan"), (0.6, "no_da")]]
    rep = compare_methods(recs)
    assert rep.columns == ["Mean Overall", "LV", "Myo"]
    assert rep.rows[0]["cells"]["LV"]["best"]


def test_compare_errors():
    with pytest.raises(ValidationError):
        compare_methods([record("no_da", 0.5, 0.1, "a"), record("sp_cyclegan", 0.5, 0.1, "b")])
    with pytest.raises(ValidationError):
        compare_methods([record("no_da", 0.5, 0.1, n=3), record("sp_cyclegan", 0.5, 0.1, n=4)])
    with pytest.raises(ValidationError):
        compare_methods([])
    with pytest.raises(ValidationError):
        record("cycada", 0.5, 0.1)


def test_report_files(tmp_path):
    rng = np.random.default_rng(0)
    data = [labelled(p, t, f"i{k}") for k, (p, t) in enumerate(zip(rng.integers(0, 2, (3, 4, 4)),
                                                                    rng.integers(0, 2, (3, 4, 4))))]
    rec = evaluate(LabelEcho(1), data, da_method="no_da", direction="synthetic", class_names={1: "vessel"})
    path = write_metrics(rec, tmp_path, per_image_csv=True)
    loaded = json.loads(path.read_text())
    assert loaded["error_kind"].startswith("standard error")
    assert MetricsRecord.from_dict(loaded).to_dict() == rec.to_dict()
    rows = (tmp_path / "per_image_dsc.csv").read_text().splitlines()
    assert rows[0] == "name,vessel,overall" and len(rows) == 4
    j, t = write_comparison(compare_methods([rec]), tmp_path)
    assert json.loads(j.read_text())["rows"][0]["da_method"] == "no_da"
    assert t.read_text().startswith("Direction: synthetic")
