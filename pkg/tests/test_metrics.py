"""Tests for the inception score, retrieval recall and the desk classifier."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch

from canvasgan.config import MetricsConfig
from canvasgan.data import images_to_tensor, load_dataset
from canvasgan.errors import BatchTooSmall, InvalidDistribution
from canvasgan.metrics import (
    DeskClassifier,
    EvalReport,
    caption_ranks,
    class_grouped_recall,
    inception_score,
    posteriors,
    retrieval_recall,
    train_classifier,
    write_report,
)


def _is_oracle(p: np.ndarray) -> float:
    n, k = p.shape
    marginal = [sum(p[i, j] for i in range(n)) / n for j in range(k)]
    total = 0.0
    for i in range(n):
        for j in range(k):
            if p[i, j] > 0:
                total += p[i, j] * math.log(p[i, j] / marginal[j])
    return math.exp(total / n)


# ---------------------------------------------------------------------------
# Inception score
# ---------------------------------------------------------------------------


class TestInceptionScore:
    def test_uniform_rows_score_one(self):
        mean, std = inception_score(np.full((20, 4), 0.25), splits=2)
        assert mean == pytest.approx(1.0, abs=1e-12)
        assert std == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_balanced_one_hot_scores_k(self, k):
        mean, std = inception_score(np.eye(k), splits=1)
        assert mean == pytest.approx(k, rel=1e-12)
        assert std == 0.0

    def test_matches_oracle(self):
        p = np.random.default_rng(0).dirichlet(np.ones(3), size=10)
        mean, _ = inception_score(p, splits=1)
        assert abs(mean - _is_oracle(p)) < 1e-6

    def test_split_mean_and_population_std(self):
        p = np.random.default_rng(1).dirichlet(np.ones(4) * 0.5, size=12)
        scores = [_is_oracle(part) for part in np.array_split(p, 3)]
        mean, std = inception_score(p, splits=3)
        assert abs(mean - np.mean(scores)) < 1e-6
        assert abs(std - np.std(scores)) < 1e-6

    def test_bounds_and_permutation_invariance(self):
        rng = np.random.default_rng(2)
        p = rng.dirichlet(np.ones(5) * 0.3, size=40)
        mean, _ = inception_score(p, splits=1)
        assert 1.0 <= mean <= 5.0
        shuffled, _ = inception_score(p[rng.permutation(40)], splits=1)
        assert shuffled == pytest.approx(mean, rel=1e-12)

    @pytest.mark.parametrize(
        "bad",
        [
            np.array([[0.5, 0.6]]),
            np.array([[1.5, -0.5]]),
            np.array([[np.nan, 1.0]]),
            np.zeros((0, 3)),
        ],
    )
    def test_invalid_rows(self, bad):
        with pytest.raises(InvalidDistribution):
            inception_score(bad, splits=1)

    def test_more_splits_than_rows(self):
        with pytest.raises(InvalidDistribution):
            inception_score(np.eye(3), splits=4)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def _recall_oracle(img: np.ndarray, sent: np.ndarray, k: int) -> float:
    n = img.shape[0]
    hits = 0
    for i in range(n):
        sims = []
        for j in range(n):
            cos = sent[i] @ img[j] / (np.linalg.norm(sent[i]) * np.linalg.norm(img[j]))
            sims.append((-cos, j))
        ranked = [j for _, j in sorted(sims)]
        hits += i in ranked[:k]
    return hits / n


class TestRetrievalRecall:
    def test_identical_embeddings(self):
        x = np.random.default_rng(0).normal(size=(6, 4))
        assert retrieval_recall(x, x, 1) == 1.0

    def test_adversarial_rows(self):
        img = np.eye(4)
        sent = np.roll(np.eye(4), 1, axis=0)
        assert retrieval_recall(img, sent, 1) == 0.0

    @pytest.mark.parametrize("k", [1, 2, 3, 6])
    def test_matches_brute_force(self, k):
        rng = np.random.default_rng(k)
        img, sent = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        assert retrieval_recall(img, sent, k) == pytest.approx(_recall_oracle(img, sent, k))

    def test_monotone_and_complete(self):
        rng = np.random.default_rng(4)
        img, sent = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        values = [retrieval_recall(img, sent, k) for k in range(1, 9)]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_ties_go_to_lower_index(self):
        x = np.ones((4, 3))
        assert caption_ranks(x, x).tolist() == [0, 1, 2, 3]
        assert retrieval_recall(x, x, 1) == 0.25

    def test_batch_too_small(self):
        with pytest.raises(BatchTooSmall):
            retrieval_recall(np.ones((1, 3)), np.ones((1, 3)), 1)


class TestClassGroupedRecall:
    def test_perfect_embeddings(self):
        x = np.random.default_rng(0).normal(size=(12, 6))
        labels = [i % 3 for i in range(12)]
        assert class_grouped_recall(x, x, labels, ks=[1, 2], rounds=5) == {1: 1.0, 2: 1.0}

    def test_class_embeddings_are_perfect_within_groups(self):
        centres = np.eye(4)
        labels = [i % 4 for i in range(16)]
        x = centres[labels]
        recall = class_grouped_recall(x, x, labels, ks=[1], rounds=10, seed=1)
        assert recall[1] == 1.0

    def test_needs_two_classes(self):
        with pytest.raises(BatchTooSmall):
            class_grouped_recall(np.ones((4, 2)), np.ones((4, 2)), [0] * 4)


# ---------------------------------------------------------------------------
# Desk classifier & report
# ---------------------------------------------------------------------------


class TestDeskClassifier:
    def test_posteriors_are_distributions(self):
        torch.manual_seed(0)
        model = DeskClassifier(num_classes=5)
        p = posteriors(model, torch.randn(7, 3, 8, 8), chunk=3)
        assert p.shape == (7, 5)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
        inception_score(p, splits=1)

    def test_train_classifier(self, tiny_config):
        cfg = tiny_config()
        data = load_dataset(cfg)
        result = train_classifier(images_to_tensor(data), [s.class_id for s in data],
                                  MetricsConfig(classifier_epochs=3), seed=0)
        assert result.model.num_classes == 4
        assert 1 <= result.epochs <= 3
        assert 0.0 <= result.accuracy <= 1.0

    def test_deterministic(self, tiny_config):
        cfg = tiny_config()
        data = load_dataset(cfg)
        images, labels = images_to_tensor(data), [s.class_id for s in data]
        a = train_classifier(images, labels, MetricsConfig(classifier_epochs=2), seed=4)
        b = train_classifier(images, labels, MetricsConfig(classifier_epochs=2), seed=4)
        assert np.array_equal(posteriors(a.model, images), posteriors(b.model, images))


class TestReport:
    def test_json_layout(self, tmp_path):
        report = EvalReport(inception_mean=1.5, inception_std=0.1, recall_at={5: 0.9, 1: 0.6})
        path = write_report(report, tmp_path / "eval_report.json")
        doc = json.loads(path.read_text(encoding="utf-8"))
        assert doc == {"inception_mean": 1.5, "inception_std": 0.1, "recall_at": {"1": 0.6, "5": 0.9}}
