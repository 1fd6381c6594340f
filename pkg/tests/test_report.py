"""Activation statistics, trend scoring, and file emitters."""

import numpy as np
import pytest

from dwgl.errors import ConfigError
from dwgl.report import (activation_figure, activation_stats, history_figure,
                         layer_stats, read_activation_csv, trend_score,
                         write_activation_csv, write_stats_json)


def brute_stats(norms):
    s = sorted(norms)
    n = len(s)
    median = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    mean = sum(norms) / n
    var = sum((x - mean) ** 2 for x in norms) / n
    act = sorted(x for x in norms if x >= mean)
    m = len(act)
    act_median = act[m // 2] if m % 2 else (act[m // 2 - 1] + act[m // 2]) / 2
    return {"median": median, "max": max(norms), "variance": var, "overall_mean": mean,
            "activated_count": m, "activated_median": act_median}


def brute_spearman(norms):
    """Average-rank Spearman via explicit tie groups and Pearson on ranks."""
    def ranks(values):
        order = sorted(range(len(values)), key=lambda i: values[i])
        r = [0.0] * len(values)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
                j += 1
            avg = (i + j) / 2 + 1
            for t in range(i, j + 1):
                r[order[t]] = avg
            i = j + 1
        return r

    x = ranks(list(range(1, len(norms) + 1)))
    y = ranks(list(norms))
    mx, my = sum(x) / len(x), sum(y) / len(y)
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = (sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y)) ** 0.5
    return num / den


class TestActivationStats:
    def test_constant_list_all_activated(self):
        s = activation_stats([1.0, 1.0, 1.0, 1.0])
        assert s["median"] == 1.0
        assert s["max"] == 1.0
        assert s["variance"] == 0.0
        assert s["activated_count"] == 4  # rule is norm >= mean

    def test_mixed_list(self):
        s = activation_stats([0.0, 0.0, 3.0, 4.0])
        assert s["overall_mean"] == pytest.approx(1.75)
        assert s["activated_count"] == 2
        assert s["max"] == 4.0
        assert s["activated_median"] == pytest.approx(3.5)

    def test_random_lists_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            norms = rng.exponential(2.0, size=int(rng.integers(1, 40))).tolist()
            got = activation_stats(norms)
            want = brute_stats(norms)
            for key, val in want.items():
                assert got[key] == pytest.approx(val, rel=1e-12), key

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        norms = rng.random(17).tolist()
        shuffled = list(norms)
        rng.shuffle(shuffled)
        a, b = activation_stats(norms), activation_stats(shuffled)
        assert a["activated_count"] == b["activated_count"]
        for key in ("median", "max", "variance", "overall_mean", "activated_median"):
            assert a[key] == pytest.approx(b[key], rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            activation_stats([])


class TestTrendScore:
    def test_strictly_decreasing_is_minus_one(self):
        assert trend_score([5.0, 4.0, 3.0, 2.0]) == pytest.approx(-1.0)

    def test_strictly_increasing_is_plus_one(self):
        assert trend_score([1.0, 2.0, 4.0, 8.0]) == pytest.approx(1.0)

    def test_constant_has_no_trend(self):
        assert trend_score([2.0, 2.0, 2.0]) == 0.0

    def test_ties_match_brute_force_rank_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            k = int(rng.integers(3, 25))
            norms = rng.choice([0.0, 0.5, 0.5, 1.0, 2.0, 2.0], size=k).tolist()
            if all(v == norms[0] for v in norms):
                continue
            assert trend_score(norms) == pytest.approx(brute_spearman(norms), rel=1e-9)

    def test_order_sensitivity(self):
        assert trend_score([3.0, 2.0, 1.0]) != trend_score([1.0, 2.0, 3.0])

    def test_needs_three_filters(self):
        with pytest.raises(ConfigError):
            trend_score([1.0, 2.0])


class TestEmitters:
    def test_csv_round_trip(self, tmp_path):
        norms = [1.5, 0.25, 3.0]
        path = tmp_path / "acts.csv"
        write_activation_csv(path, norms)
        text = path.read_text()
        assert text.splitlines()[0] == "index,norm"
        assert read_activation_csv(path) == norms

    def test_stats_json(self, tmp_path):
        path = tmp_path / "stats.json"
        write_stats_json(path, layer_stats({"conv": [1.0, 2.0, 3.0]}))
        import json
        loaded = json.loads(path.read_text())
        assert loaded["conv"]["filters"] == 3
        assert loaded["conv"]["trend_score"] == pytest.approx(1.0)

    def test_activation_figure_written(self, tmp_path):
        path = tmp_path / "scatter.svg"
        activation_figure(path, [1.0, 0.5, 2.0, 0.1], title="layer")
        assert path.exists() and path.stat().st_size > 500
        assert b"<svg" in path.read_bytes()[:300]

    def test_history_figure_written(self, tmp_path):
        rows = [
            {"epoch": 0, "split": "train", "loss": 1.0, "penalty": 0.5, "accuracy": 0.3},
            {"epoch": 0, "split": "val", "loss": 1.1, "penalty": 0.5, "accuracy": 0.25},
            {"epoch": 1, "split": "train", "loss": 0.7, "penalty": 0.4, "accuracy": 0.6},
            {"epoch": 1, "split": "val", "loss": 0.8, "penalty": 0.4, "accuracy": 0.5},
        ]
        path = tmp_path / "history.png"
        history_figure(path, rows)
        assert path.exists() and path.stat().st_size > 500
