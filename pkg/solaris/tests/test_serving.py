"""Tests for feature assembly, the vertical model and request handling."""

import numpy as np
import pytest

from solaris.embed_cache import CacheKey, EmbedCache
from solaris.enrichment import ABSENT, EXACT, EmbeddingSource, EnrichedBatch, EnrichedFeature, Enricher, UserAggregate
from solaris.errors import UnknownIdError, ValidationError
from solaris.serving import (
    FeatureLayout,
    ImpressionPolicy,
    ModelStore,
    PipelineState,
    ServingCosts,
    VerticalModel,
    assemble_batch,
    assemble_features,
    bce_gradient,
    bce_loss,
    create_default_pipeline,
    handle_request,
    predict,
    rank_candidates,
    sgd_update,
    train_online,
)
from solaris.synthetic_world import RankingRequest, WorldConfig, generate_world
from solaris.teacher_model import TeacherEmbedding


@pytest.fixture
def layout():
    return FeatureLayout(hash_buckets=8, d_emb=3)


@pytest.fixture
def world():
    return generate_world(WorldConfig(n_users=4, n_items=200, d_lat=4, candidates_per_request=10, seed=6))


class TestFeatureLayout:
    def test_offsets(self, layout):
        assert layout.bias_index == 16
        assert (layout.emb_offset, layout.agg_offset, layout.flags_offset, layout.dim) == (17, 20, 23, 25)
        assert layout.describe()["flags"] == [23, 25]

    def test_hash_buckets_are_stable_and_salted(self, layout):
        assert layout.user_index(42) == FeatureLayout(8, 3).user_index(42)
        assert 0 <= layout.user_index(42) < 8
        assert 8 <= layout.item_index(42) < 16
        salted = [FeatureLayout(8, 3, salt="other").user_index(u) for u in range(50)]
        assert salted != [layout.user_index(u) for u in range(50)]

    def test_absent_features_are_flagged_zero(self, layout):
        vector = assemble_features(EnrichedFeature.absent(3), 1, 2, layout).to_array()
        assert vector.shape == (25,)
        assert vector[layout.bias_index] == 1.0
        assert vector.sum() == 3.0
        assert not vector[layout.emb_offset :].any()

    def test_present_features(self, layout):
        enriched = EnrichedFeature(
            np.array([1.0, 2.0, 3.0]), EmbeddingSource.SIMILARITY_IMPUTED, UserAggregate(np.array([4.0, 5.0, 6.0]), True)
        )
        feature = assemble_features(enriched, 1, 2, layout)
        vector = feature.to_array()
        np.testing.assert_array_equal(vector[17:23], [1, 2, 3, 4, 5, 6])
        np.testing.assert_array_equal(vector[23:], [1.0, 1.0])
        assert len(feature.to_bytes()) == 25 * 8

    def test_wrong_dimension(self, layout):
        with pytest.raises(ValidationError):
            assemble_features(EnrichedFeature.absent(2), 1, 2, layout)

    def test_batch_matches_single(self, layout):
        batch = EnrichedBatch.absent(np.array([5, 9]), 3)
        batch.vectors[1] = [0.5, -1.0, 2.0]
        batch.sources[1] = EXACT
        batch.agg_vectors[:] = 0.25
        batch.agg_present[:] = True
        matrix = assemble_batch(batch, 3, layout)
        for row, item in enumerate((5, 9)):
            np.testing.assert_array_equal(matrix[row], assemble_features(batch.feature(row), 3, item, layout).to_array())


class TestVerticalModel:
    def test_zero_model_predicts_half(self, layout):
        model = VerticalModel.zeros(layout.dim, 0.1)
        assert predict(model, np.ones(layout.dim)) == pytest.approx(0.5)
        np.testing.assert_allclose(predict(model, np.ones((3, layout.dim))), [0.5] * 3)

    def test_weights_are_read_only(self):
        model = VerticalModel.zeros(4, 0.1)
        with pytest.raises(ValueError):
            model.weights[0] = 1.0

    def test_non_finite_features(self):
        model = VerticalModel.zeros(2, 0.1)
        with pytest.raises(ValidationError):
            predict(model, np.array([1.0, np.inf]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            predict(VerticalModel.zeros(3, 0.1), np.ones(2))

    def test_invalid_label(self):
        with pytest.raises(ValidationError):
            sgd_update(VerticalModel.zeros(2, 0.1), np.ones(2), 2)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        h = 1e-5
        for _ in range(100):
            dim = int(rng.integers(3, 12))
            model = VerticalModel(rng.normal(scale=0.5, size=dim), 0.1)
            x = rng.normal(size=dim)
            y = int(rng.integers(2))
            analytic = bce_gradient(model, x, y)
            numeric = np.empty(dim)
            for j in range(dim):
                step = np.zeros(dim)
                step[j] = h
                numeric[j] = (
                    bce_loss(VerticalModel(model.weights + step, 0.1), x, y)
                    - bce_loss(VerticalModel(model.weights - step, 0.1), x, y)
                ) / (2 * h)
            error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
            assert error < 1e-6

    def test_sgd_step_reduces_loss(self):
        model = VerticalModel.zeros(3, 0.5)
        x = np.array([1.0, -0.5, 2.0])
        updated = sgd_update(model, x, 1)
        assert bce_loss(updated, x, 1) < bce_loss(model, x, 1)
        assert updated.step_count == 1
        assert model.step_count == 0

    def test_train_online_matches_step_by_step(self):
        rng = np.random.default_rng(3)
        features = rng.normal(size=(40, 6))
        labels = rng.integers(0, 2, size=40)
        trained, predictions = train_online(VerticalModel.zeros(6, 0.05), features, labels)
        model = VerticalModel.zeros(6, 0.05)
        for x, y, p in zip(features, labels, predictions):
            assert predict(model, x) == pytest.approx(p, abs=1e-12)
            model = sgd_update(model, x, int(y))
        np.testing.assert_allclose(trained.weights, model.weights, atol=1e-12)
        assert trained.step_count == 40

    def test_model_store_commit(self):
        store = ModelStore(VerticalModel.zeros(2, 0.1))
        before = store.snapshot()
        after = store.commit(np.array([[1.0, 0.0], [0.0, 1.0]]), [1, 0])
        assert store.snapshot() is after
        assert after.step_count == 2
        assert not before.weights.any()
        assert after.weights[0] > 0 > after.weights[1]


class TestRanking:
    def test_rank_ties_by_item_id(self):
        ranked = rank_candidates(np.array([9, 3, 5]), np.array([0.2, 0.2, 0.7]))
        assert ranked.tolist() == [5, 3, 9]


class TestHandleRequest:
    def test_baseline_request(self, world):
        state = create_default_pipeline(world, learning_rate=0.1, hash_buckets=8, d_emb=3)
        state.impression_policy = ImpressionPolicy.REQUEST_ORDER
        request = world.request_stream().next_request()
        record = handle_request(request, state)
        assert record.labeled_index.tolist() == [0, 1, 2, 3, 4]
        np.testing.assert_array_equal(record.labeled_items, request.candidates[:5])
        assert record.labels.tolist() == world.true_labels(request.user_id, request.candidates[:5], request.timestamp).tolist()
        np.testing.assert_allclose(record.predictions, 0.5)
        assert np.all(record.sources == ABSENT)
        assert state.model_store.snapshot().step_count == 5
        assert sorted(record.ranked.tolist()) == sorted(request.candidates.tolist())

    def test_model_rank_policy(self, world):
        state = create_default_pipeline(world, hash_buckets=8, d_emb=3)
        weights = np.zeros(state.layout.dim)
        weights[8:16] = np.arange(8.0)
        state.model_store = ModelStore(VerticalModel(weights, 0.05))
        state.impression_policy = ImpressionPolicy.MODEL_RANK
        request = world.request_stream().next_request()
        record = handle_request(request, state)
        np.testing.assert_array_equal(record.labeled_items, record.ranked[:5])

    def test_default_policy_labels_top_ranked(self, world):
        state = create_default_pipeline(world, hash_buckets=8, d_emb=3)
        assert state.impression_policy is ImpressionPolicy.MODEL_RANK
        rng = np.random.default_rng(11)
        state.model_store = ModelStore(VerticalModel(rng.normal(size=state.layout.dim), 0.05))
        request = world.request_stream().next_request()
        record = handle_request(request, state)
        np.testing.assert_array_equal(record.labeled_items, record.ranked[:5])
        np.testing.assert_array_equal(
            record.labels, world.true_labels(request.user_id, record.ranked[:5], request.timestamp)
        )
        assert record.labeled_predictions.min() >= np.delete(record.predictions, record.labeled_index).max()

    def test_exact_embeddings_flow_into_features(self, world):
        cache = EmbedCache(d_emb=3)
        request = world.request_stream().next_request()
        item = int(request.candidates[0])
        cache.put(CacheKey(request.user_id, item), TeacherEmbedding(np.ones(3), 0.0), request.timestamp)
        requeued = []
        state = create_default_pipeline(world, hash_buckets=8, d_emb=3)
        state.enricher = Enricher(
            cache, None, ttl_seconds=3600.0, enable_similarity=False, requeue=lambda k, t: requeued.append(k)
        )
        record = handle_request(request, state)
        assert record.sources[0] == EXACT
        assert np.all(record.sources[1:] == ABSENT)
        assert record.agg_present[1:].all() and not record.agg_present[0]
        assert len(requeued) == request.candidates.size - 1

    def test_unknown_user(self, world):
        state = create_default_pipeline(world, hash_buckets=8, d_emb=3)
        with pytest.raises(UnknownIdError):
            handle_request(RankingRequest(0, 99, 0.0, [1, 2]), state)

    def test_record_serialisation(self, world):
        state = create_default_pipeline(world, hash_buckets=8, d_emb=3)
        record = handle_request(world.request_stream().next_request(), state)
        summary = record.to_dict()
        assert len(summary["labeled"]) == 5
        assert summary["source_counts"] == {"exact": 0, "similarity_imputed": 0, "absent": 10}
        assert "candidates" not in summary
        assert len(record.to_dict("full")["candidates"]) == 10


class TestServingLatency:
    def test_latency_depends_only_on_serving_costs(self):
        costs = ServingCosts(lookup_ms=0.02, enrichment_ms=0.05, predict_ms=0.01, request_overhead_ms=1.0)
        assert costs.latency_seconds(200, True) == pytest.approx((1.0 + 200 * 0.08) / 1000)
        assert costs.latency_seconds(200, False) == pytest.approx((1.0 + 200 * 0.01) / 1000)

    def test_pipeline_state_defaults(self, world, layout):
        state = PipelineState(world=world, layout=layout, model_store=ModelStore(VerticalModel.zeros(layout.dim, 0.1)))
        assert state.enricher is None
        assert state.label_slate_n == 5
