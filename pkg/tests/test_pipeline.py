import numpy as np
import pytest

from s3moe import analysis as an
from s3moe import diffcore as dc
from s3moe import losses as ls
from s3moe import pipeline as pl
from s3moe import synthdata as sd
from s3moe.encoder import EncoderConfig, parameter_group
from s3moe.losses import EmbeddingBatch, LossWeights
from s3moe.moe import MoEConfig


def tiny_model(seed=0, n_layers=2, d_model=16):
    mcfg = MoEConfig(d_model=d_model, granularity_chi=2, expansion_rho=2, top_k=2, d_ffn=2 * d_model)
    ecfg = EncoderConfig(d_model=d_model, n_heads=2, d_in=8, moe=mcfg, n_layers=n_layers)
    return pl.S3Model(ecfg, ecfg, seed=seed)


def tiny_data(n=32, seed=0, mode="shared-only"):
    spec = sd.FactorSpec(n_shared_symbols=4, n_unique_symbols=2, d_in=8, seq_len=2, embed_noise_sigma=0.05)
    task = sd.TaskSpec(mode=mode, n_classes=2 if mode == "unique-only" else 4)
    return sd.as_arrays(sd.generate_dataset(n, spec, task, seed=seed))


def snapshot(model):
    return {n: t.data.copy() for n, t in model.named_params().items()}


class TestStageConfig:
    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            pl.StageConfig(stage="pruning")

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            pl.StageConfig(stage="selection", batch_size=1)


class TestSpecialization:
    def test_zero_epochs_is_identity(self):
        model = tiny_model()
        before = snapshot(model)
        x1, x2, _, _ = tiny_data()
        pl.train_specialization(model, x1, x2, pl.StageConfig(stage="specialization", epochs=0, batch_size=16))
        for name, arr in snapshot(model).items():
            np.testing.assert_array_equal(arr, before[name])

    def test_single_step_matches_manual_gradient(self):
        x1, x2, _, _ = tiny_data(n=16)
        weights = LossWeights(lambda_aux=0.0)
        cfg = pl.StageConfig(
            stage="specialization", epochs=1, batch_size=16, learning_rate=0.05,
            momentum=0.0, seed=3, weights=weights,
        )
        model = tiny_model(seed=7)
        pl.train_specialization(model, x1, x2, cfg)

        ref = tiny_model(seed=7)
        params = ref.named_params()
        sigma = 1.0 / ref.enc1.config.moe.n_experts
        rng = dc.RngState(cfg.seed)
        order = rng.stream(0).permutation(16)
        idx = order[:16]
        r = rng.stream(10_000)
        ea1, ea2 = ref.encode_pair(x1[idx], x2[idx], noise_sigma=sigma, rng=r.stream(0))
        eb1, eb2 = ref.encode_pair(x1[idx], x2[idx], noise_sigma=sigma, rng=r.stream(1))
        batch = EmbeddingBatch(z1=ea1.z, z2=ea2.z, z1_view2=eb1.z, z2_view2=eb2.z)
        loss, _ = ls.l_special(batch, ea1.records + ea2.records, weights)
        loss.backward()
        trained = model.named_params()
        for name, t in params.items():
            expected = t.data if t.grad is None else (t.data - 0.05 * t.grad).astype(np.float32)
            np.testing.assert_array_equal(trained[name].data, expected, err_msg=name)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        model = tiny_model()
        x1, x2, _, _ = tiny_data()
        cfg = pl.StageConfig(stage="specialization", epochs=5, batch_size=16, learning_rate=1e30)
        with pytest.raises(pl.DivergenceError):
            pl.train_specialization(model, x1, x2, cfg)

    def test_log_contains_every_term(self):
        model = tiny_model()
        x1, x2, _, _ = tiny_data()
        log = pl.train_specialization(
            model, x1, x2, pl.StageConfig(stage="specialization", epochs=1, batch_size=16, learning_rate=0.01)
        )
        assert len(log) == 2
        for key in ("rep", "dsc", "aux", "aux_imp", "aux_load", "aux_local", "aux_global", "total"):
            assert key in log[0]

    def test_wrong_stage_rejected(self):
        model = tiny_model()
        x1, x2, y, _ = tiny_data()
        with pytest.raises(ValueError):
            pl.train_specialization(model, x1, x2, pl.StageConfig(stage="selection"))


class TestSelection:
    def run_selection(self, weights=None, epochs=1):
        model = tiny_model(seed=1)
        x1, x2, y, _ = tiny_data(n=32, seed=1)
        before = snapshot(model)
        cfg = pl.StageConfig(
            stage="selection", epochs=epochs, batch_size=16, learning_rate=0.1,
            weights=weights or LossWeights(),
        )
        log = pl.train_selection(model, x1, x2, y, cfg)
        return model, before, log

    def test_zero_weights_leave_routers_unchanged(self):
        model, before, _ = self.run_selection(LossWeights(lambda_suff=0.0, lambda_min=0.0))
        for name, arr in snapshot(model).items():
            np.testing.assert_array_equal(arr, before[name])

    def test_freeze_invariant(self):
        model, before, _ = self.run_selection()
        changed = []
        for name, arr in snapshot(model).items():
            if parameter_group(name) == "routers":
                if not np.array_equal(arr, before[name]):
                    changed.append(name)
            else:
                np.testing.assert_array_equal(arr, before[name], err_msg=name)
        assert changed, "no router parameter moved"

    def test_entropy_monitors_logged(self):
        _, _, log = self.run_selection()
        for key in ("m1_local_entropy", "m1_global_neg_entropy", "m2_local_entropy", "m2_global_neg_entropy"):
            assert key in log[0]

    def test_requires_labels(self):
        model = tiny_model()
        x1, x2, _, _ = tiny_data()
        with pytest.raises(ValueError):
            pl.train_selection(model, x1, x2, None, pl.StageConfig(stage="selection", batch_size=16))

    def test_trainable_ratio_default_widths(self):
        # chi=8, rho=8, 5 layers at transformer-like widths
        mcfg = MoEConfig(d_model=128, granularity_chi=8, expansion_rho=8, top_k=8, d_ffn=512)
        ecfg = EncoderConfig(d_model=128, n_heads=8, d_in=32, moe=mcfg, n_layers=5)
        model = pl.S3Model(ecfg, ecfg, seed=0)
        rep = an.trainable_param_ratio(model.named_params(), parameter_group)
        assert rep["trainable_pct"] < 1.2


class TestStratifiedOrder:
    def test_permutation_of_all_indices(self):
        y = np.array([0, 0, 0, 1, 1, 2])
        order = pl.stratified_order(y, dc.RngState(0))
        assert sorted(order.tolist()) == list(range(6))

    def test_classes_interleaved(self):
        y = np.repeat([0, 1, 2], 6)
        order = pl.stratified_order(y, dc.RngState(1))
        first = y[order[:3]]
        assert sorted(first.tolist()) == [0, 1, 2]


def collect_records(model, x1, x2):
    e1, e2 = model.encode_pair(x1, x2)
    return {1: e1.records, 2: e2.records}, (e1, e2)


class TestPruneMask:
    def test_p_one_retains_all_and_is_identity(self):
        model = tiny_model(seed=2)
        x1, x2, _, _ = tiny_data(n=8, seed=2)
        records, (e1, e2) = collect_records(model, x1, x2)
        mask = pl.build_prune_mask(records, p=1.0)
        n_pairs = sum(r.selected.size for recs in records.values() for r in recs)
        assert len(mask.retained) == n_pairs
        masks = {1: mask.slot_masks(1, e1.records), 2: mask.slot_masks(2, e2.records)}
        m1, m2 = model.encode_pair(x1, x2, masks=masks)
        np.testing.assert_array_equal(m1.z.data, e1.z.data)
        np.testing.assert_array_equal(m2.z.data, e2.z.data)

    def test_p_zero_is_residual_only_and_finite(self):
        model = tiny_model(seed=3)
        x1, x2, _, _ = tiny_data(n=8, seed=3)
        records, (e1, e2) = collect_records(model, x1, x2)
        mask = pl.build_prune_mask(records, p=0.0)
        assert mask.retained == set()
        masks = {1: mask.slot_masks(1, e1.records), 2: mask.slot_masks(2, e2.records)}
        m1, _ = model.encode_pair(x1, x2, masks=masks)
        assert np.all(np.isfinite(m1.z.data))

    def test_ceiling_arithmetic(self):
        model = tiny_model(seed=4, n_layers=1)
        x1, x2, _, _ = tiny_data(n=8, seed=4)
        records, _ = collect_records(model, x1, x2)
        n_pairs = sum(r.selected.size for recs in records.values() for r in recs)
        mask = pl.build_prune_mask(records, p=0.25)
        assert len(mask.retained) == int(np.ceil(0.25 * n_pairs))

    def test_p_out_of_range(self):
        with pytest.raises(ValueError):
            pl.build_prune_mask({}, p=1.5)

    def test_nesting(self):
        model = tiny_model(seed=5)
        x1, x2, _, _ = tiny_data(n=8, seed=5)
        records, _ = collect_records(model, x1, x2)
        prev = None
        for p in (1.0, 0.7, 0.4, 0.1):
            mask = pl.build_prune_mask(records, p=p)
            if prev is not None:
                assert mask.retained <= prev
            prev = mask.retained

    def test_per_encoder_scope_keeps_ceil_per_group(self):
        model = tiny_model(seed=6)
        x1, x2, _, _ = tiny_data(n=8, seed=6)
        records, _ = collect_records(model, x1, x2)
        mask = pl.build_prune_mask(records, p=0.5, scope="per-encoder")
        for m in (1, 2):
            n_m = sum(r.selected.size for r in records[m])
            kept = sum(1 for pid in mask.retained if pid[0] == m)
            assert kept == int(np.ceil(0.5 * n_m))

    def test_tie_rule_lexicographic(self):
        model = tiny_model(seed=7)
        x1, x2, _, _ = tiny_data(n=4, seed=7)
        records, _ = collect_records(model, x1, x2)
        # duplicate every score so ties are everywhere
        for recs in records.values():
            for r in recs:
                r.weights.data = np.full_like(r.weights.data, 0.25)
        mask = pl.build_prune_mask(records, p=0.5)
        all_ids = sorted(
            (m, r.layer_id, t, s)
            for m, recs in records.items()
            for r in recs
            for t in range(r.selected.shape[0])
            for s in range(r.selected.shape[1])
        )
        expected = set(all_ids[: len(mask.retained)])
        assert mask.retained == expected


class TestLinearProbe:
    def test_random_labels_chance_level(self):
        g = np.random.default_rng(0)
        z = g.standard_normal((1500, 8))
        y = g.integers(0, 2, 1500)
        res = pl.linear_probe(z[:1000], y[:1000], z[1000:], y[1000:], n_seeds=1)
        assert abs(res.mean - 0.5) <= 0.05

    def test_separable_embeddings_perfect(self):
        y = np.tile([0, 1, 2], 30)
        z = np.eye(3)[y]
        res = pl.linear_probe(z[:60], y[:60], z[60:], y[60:])
        assert res.mean == 1.0

    def test_single_class_error(self):
        z = np.random.default_rng(1).standard_normal((10, 4))
        with pytest.raises(ValueError):
            pl.linear_probe(z, np.zeros(10, int), z, np.zeros(10, int))

    def test_deterministic(self):
        g = np.random.default_rng(2)
        z = g.standard_normal((100, 6))
        y = (z[:, 0] > 0).astype(int)
        a = pl.linear_probe(z[:80], y[:80], z[80:], y[80:])
        b = pl.linear_probe(z[:80], y[:80], z[80:], y[80:])
        assert a.per_seed == b.per_seed

    def test_result_consistency(self):
        res = pl.ProbeResult.from_seeds([0.8, 0.9, 1.0])
        assert res.mean == pytest.approx(0.9)
        assert res.std == pytest.approx(np.std([0.8, 0.9, 1.0]))


class TestSweepAccounting:
    def test_fraction_normalized_and_monotone(self):
        model = tiny_model(seed=8)
        x1, x2, y, _ = tiny_data(n=48, seed=8)
        data = (x1[:32], x2[:32], y[:32])
        test = (x1[32:], x2[32:], y[32:])
        rows = pl.sparsify_sweep(model, data, test, p_list=(1.0, 0.6, 0.2), n_seeds=1)
        fracs = [r["active_param_pct"] for r in rows]
        assert fracs[0] == pytest.approx(100.0)
        assert fracs[0] > fracs[1] > fracs[2]


class TestCheckpointAndDeterminism:
    def test_save_load_bit_exact(self, tmp_path):
        model = tiny_model(seed=9)
        x1, x2, _, _ = tiny_data(n=16, seed=9)
        pl.train_specialization(
            model, x1, x2, pl.StageConfig(stage="specialization", epochs=1, batch_size=16, learning_rate=0.01)
        )
        path = tmp_path / "ckpt.json"
        model.save(path)
        other = tiny_model(seed=10)
        other.load(path)
        for name, t in model.named_params().items():
            np.testing.assert_array_equal(other.named_params()[name].data, t.data)

    def test_load_architecture_mismatch(self, tmp_path):
        model = tiny_model(seed=11)
        path = tmp_path / "ckpt.json"
        model.save(path)
        other = tiny_model(seed=11, n_layers=1)
        with pytest.raises(ValueError):
            other.load(path)

    def test_fixed_seed_reproduces_probe_accuracy(self):
        results = []
        for _ in range(2):
            model = tiny_model(seed=12)
            x1, x2, y, _ = tiny_data(n=48, seed=12)
            cfg = pl.StageConfig(stage="specialization", epochs=2, batch_size=16, learning_rate=0.05, seed=5)
            pl.train_specialization(model, x1[:32], x2[:32], cfg)
            sel = pl.StageConfig(stage="selection", epochs=1, batch_size=16, learning_rate=0.05, seed=6)
            pl.train_selection(model, x1[:32], x2[:32], y[:32], sel)
            zt, _ = pl.embed_dataset(model, x1[:32], x2[:32])
            ze, _ = pl.embed_dataset(model, x1[32:], x2[32:])
            results.append(pl.linear_probe(zt, y[:32], ze, y[32:]).per_seed)
        assert results[0] == results[1]
