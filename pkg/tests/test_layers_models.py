import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikedisc import tensor as tt
from spikedisc.errors import ConfigError, ContractError, DegenerateEmbeddingError, DimensionError, NumericFault
from spikedisc.gradcheck import gradcheck
from spikedisc.layers import (
    ActAfterAdditionBlock,
    L2NormHead,
    Linear,
    RunContext,
    Sequential,
    block_forward,
    head_to_spikes,
    l2_head_forward,
)
from spikedisc.models import (
    AudioModelConfig,
    FusionConfig,
    VisualModelConfig,
    build_audio,
    build_mlp,
    build_model,
    build_smlp,
    build_visual,
)
from spikedisc.neurons import LIFConfig, SurrogateSpec, lif_sequence
from spikedisc.tensor import Tensor


def _zero_block(block):
    for p in block.named_parameters().values():
        if p.data.ndim == 4:
            p.data[...] = 0.0


class TestBlock:
    def test_zero_input_zero_output(self):
        b = ActAfterAdditionBlock(4, 4)
        _zero_block(b)
        out = block_forward(b, np.zeros((3, 2, 4, 5, 5)))
        assert out.shape == (3, 2, 4, 5, 5)
        assert out.data.sum() == 0

    def test_silent_branch_passes_skip(self):
        # inner LIF never fires and BN beta is zero, so the branch adds exactly 0
        silent = LIFConfig(v_th=1e12)
        out_cfg = LIFConfig(beta=0.9)
        b = ActAfterAdditionBlock(3, 3, lif_inner=silent, lif_out=out_cfg)
        x = np.random.default_rng(0).uniform(0, 2, (4, 2, 3, 5, 5))
        got = block_forward(b, x).data
        want = lif_sequence(x, out_cfg)
        want = getattr(want, "data", want)
        np.testing.assert_array_equal(got, want)

    def test_projection_skip_shape(self):
        b = ActAfterAdditionBlock(4, 8, stride=2)
        assert b.downsample is not None
        out = block_forward(b, np.ones((2, 1, 4, 6, 6)))
        assert out.shape == (2, 1, 8, 3, 3)

    def test_relaxed_gradcheck(self):
        spec = SurrogateSpec("arctan", a=2.0, relaxed=True)
        lif = LIFConfig(beta=0.8, v_th=0.5, surrogate=spec, detach_reset=False)
        b = ActAfterAdditionBlock(2, 2, lif_inner=lif, lif_out=lif, rng=np.random.default_rng(3))
        conv1 = b.branch.layers[0]
        x = np.random.default_rng(1).normal(0.5, 1.0, (3, 2, 2, 4, 4))

        def f(w):
            conv1.weight = w
            return block_forward(b, x, RunContext(training=False)).sum()

        assert gradcheck(f, [conv1.weight.data.copy()]) < 1e-3

    def test_variant_listings(self):
        base = "\n".join(ActAfterAdditionBlock(2, 2).listing())
        after = "\n".join(ActAfterAdditionBlock(2, 2, variant="lif_after_bn").listing())
        before = ActAfterAdditionBlock(2, 2, variant="lif_before_add").listing()
        assert base != after
        assert after.index("bn(2)") < after.index("lif(")
        assert sum("lif(" in line for line in before) == 3

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ActAfterAdditionBlock(2, 2, variant="nope")


class TestL2Head:
    def _head(self, w):
        h = L2NormHead(*np.asarray(w).shape)
        h.weight.data = np.asarray(w, dtype=float)
        return h

    def test_hand_example(self):
        h = self._head([[1.0], [0.0]])
        np.testing.assert_allclose(h.embed(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)
        assert h.logits(Tensor([[3.0, 4.0]])).data[0, 0] == pytest.approx(0.6, abs=1e-15)

    def test_aligned_is_one(self):
        h = self._head([[0.0, 1.0], [2.0, 1.0]])
        assert h.logits(Tensor([[0.0, 5.0]])).data[0, 0] == 1.0
        # a generic parallel pair is 1 up to rounding of the two normalizations
        h = self._head([[2.0, 0.0], [2.0, 1.0]])
        assert h.logits(Tensor([[5.0, 5.0]])).data[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_average_of_copies(self):
        h = L2NormHead(5, 3, rng=np.random.default_rng(0))
        z = np.random.default_rng(1).normal(size=(2, 5))
        a = l2_head_forward(h, np.stack([z] * 4)).data
        np.testing.assert_allclose(a, h.logits(Tensor(z)).data, rtol=1e-15)

    def test_degenerate(self):
        h = L2NormHead(3, 2)
        with pytest.raises(DegenerateEmbeddingError):
            l2_head_forward(h, np.zeros((2, 1, 3)))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            L2NormHead(3, 2).logits(Tensor(np.ones((1, 4))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_invariants(self, seed, c):
        rng = np.random.default_rng(seed)
        h = L2NormHead(6, 4, rng=rng)
        z = rng.normal(size=(5, 6))
        logits = h.logits(Tensor(z)).data
        assert np.all(np.abs(logits) <= 1.0)
        np.testing.assert_allclose(np.linalg.norm(h.embed(Tensor(z)).data, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(h.normalized_weight().data, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(h.logits(Tensor(c * z)).data, logits, rtol=0, atol=1e-15)

    def test_gradcheck(self):
        rng = np.random.default_rng(0)
        h = L2NormHead(4, 3)
        z = rng.normal(size=(2, 4))
        w = rng.normal(size=(4, 3))
        c = rng.normal(size=(2, 3))

        def f(z_, w_):
            h.weight = w_
            return (h.logits(z_) * Tensor(c)).sum()

        assert gradcheck(f, [z, w]) < 1e-6


class TestHeadToSpikes:
    def test_unit_logit_fires_every_step(self):
        counts = head_to_spikes(np.array([[1.0]]), LIFConfig(beta=0.9, v_th=1.0), 8)
        assert counts.data[0, 0] == 8

    def test_nonpositive_logit_silent(self):
        counts = head_to_spikes(np.array([[0.0, -0.5, -1.0]]), LIFConfig(), 8)
        assert counts.data.sum() == 0

    def test_monotone_sweep(self):
        logits = np.linspace(-1, 1, 401)[None]
        for beta in (0.0, 0.5, 0.9, 1.0):
            for reset in ("subtract", "zero", "none"):
                c = head_to_spikes(logits, LIFConfig(beta=beta, reset=reset), 8).data[0]
                assert np.all(np.diff(c) >= 0), (beta, reset)

    def test_bad_scale(self):
        with pytest.raises(ContractError):
            head_to_spikes(np.ones((1, 1)), LIFConfig(), 4, scale=0.0)


class TestSequential:
    def test_nan_names_layer(self):
        lin = Linear(2, 2, rng=np.random.default_rng(0))
        lin.weight.data[0, 0] = np.nan
        seq = Sequential([Linear(2, 2, rng=np.random.default_rng(0)), lin])
        with pytest.raises(NumericFault, match="layer 1"):
            seq.step(Tensor(np.ones((1, 2))), RunContext())


class TestModels:
    def test_paper_dims(self):
        assert VisualModelConfig().feature_dim == 512
        assert AudioModelConfig().feature_dim == 27136
        assert FusionConfig().input_dim == 27648

    def test_paper_smlp_first_layer(self):
        g = build_smlp(FusionConfig(hidden=(4,)))
        lin = g.stem.layers[1]
        assert lin.weight.shape == (4, 27648)

    def test_paper_visual_listing(self):
        g = build_visual(VisualModelConfig())
        assert g.feature_dim == 512
        assert sum("ActAfterAddition" in line for line in g.listing()) == 8

    def test_desk_smlp_width(self):
        g = build_smlp(FusionConfig.desk(visual_dim=16, audio_dim=16))
        assert g.stem.layers[1].weight.shape[1] == 32

    @pytest.mark.parametrize("modality", ["visual", "audio"])
    def test_desk_forward(self, modality):
        cfg = {"visual": VisualModelConfig.desk(), "audio": AudioModelConfig.desk()}[modality]
        g = build_model(modality, cfg, seed=0)
        shape = (3, 8, 8) if modality == "visual" else (1, 64, 28)
        x = np.random.default_rng(0).uniform(0, 1, (2, *shape))
        res = g.forward_multistep(x, 4)
        assert res.counts.shape == (2, 4)
        assert res.embeddings.shape == (4, 2, cfg.feature_dim)
        assert np.all((res.counts.data >= 0) & (res.counts.data <= 4))

    def test_zero_input_zero_counts(self):
        g = build_visual(VisualModelConfig.desk(), seed=0)
        res = g.forward_multistep(np.zeros((2, 3, 8, 8)), 4)
        assert res.counts.data.sum() == 0

    def test_zero_embeddings_fusion_deterministic(self):
        g = build_smlp(FusionConfig.desk(), seed=1)
        x = np.zeros((3, FusionConfig.desk().input_dim))
        a = g.forward_multistep(x, 4).counts.data
        b = g.forward_multistep(x, 4).counts.data
        np.testing.assert_array_equal(a, b)

    def test_T1_single_step(self):
        g = build_audio(AudioModelConfig.desk(with_dropout=False), seed=0)
        x = np.random.default_rng(2).uniform(0, 1, (2, 1, 64, 28))
        res = g.forward_multistep(x, 1)
        ctx = RunContext()
        z = g.body.step(g.stem.step(Tensor(x), ctx), ctx)
        np.testing.assert_array_equal(res.embeddings.data[0], z.data)

    def test_counts_nondecreasing_in_T_without_reset(self):
        cfg = FusionConfig.desk(neuron=LIFConfig(reset="none"), head="l2norm")
        g = build_smlp(cfg, seed=0)
        x = np.random.default_rng(0).normal(size=(4, cfg.input_dim))
        c4 = g.forward_multistep(x, 4).counts.data
        c8 = g.forward_multistep(x, 8).counts.data
        assert np.all(c8 >= c4)

    def test_audio_toggles(self):
        base = AudioModelConfig()
        shallow = AudioModelConfig(with_third_block=False)
        flat = AudioModelConfig(with_pooling=False)
        assert shallow.feature_dim > base.feature_dim
        assert shallow.output_shape() == (32, 16, 106)
        assert flat.output_shape()[1:] == (64, 427)

    def test_ablation_listings_differ(self):
        def lines(cfg, builder):
            return builder(cfg).listing()

        vb = lines(VisualModelConfig.desk(), build_visual)
        ab = lines(AudioModelConfig.desk(), build_audio)
        assert lines(VisualModelConfig.desk(variant="lif_after_bn"), build_visual) != vb
        assert lines(VisualModelConfig.desk(variant="lif_before_add"), build_visual) != vb
        nd = lines(AudioModelConfig.desk(with_dropout=False), build_audio)
        assert not any("dropout" in line for line in nd) and any("dropout" in line for line in ab)
        n3 = lines(AudioModelConfig.desk(with_third_block=False), build_audio)
        assert sum("conv" in line for line in n3) == sum("conv" in line for line in ab) - 1
        npool = lines(AudioModelConfig.desk(with_pooling=False), build_audio)
        assert not any("maxpool" in line for line in npool)

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            build_visual(VisualModelConfig(widths=(8,), depths=(1, 1)))
        with pytest.raises(ConfigError):
            build_audio(AudioModelConfig(channels=(4,)))
        with pytest.raises(ConfigError):
            build_model("lidar", None)
        with pytest.raises(ConfigError):
            build_visual(VisualModelConfig.desk(head="softmax"))

    def test_input_mismatch(self):
        g = build_audio(AudioModelConfig.desk(), seed=0)
        with pytest.raises(DimensionError):
            g.forward_multistep(np.zeros((1, 1, 32, 28)), 2)

    def test_config_round_trip(self):
        cfg = AudioModelConfig.desk(with_pooling=False)
        assert AudioModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            AudioModelConfig.from_dict({"chanels": [1]})

    def test_state_round_trip(self):
        g = build_visual(VisualModelConfig.desk(), seed=0)
        h = build_visual(VisualModelConfig.desk(), seed=1)
        h.load_state_arrays(g.state_arrays())
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8))
        np.testing.assert_array_equal(g.forward_multistep(x, 3).counts.data, h.forward_multistep(x, 3).counts.data)

    def test_mlp(self):
        g = build_mlp(2, (8,), 3, hidden_bn=False)
        assert [l.kind for l in g.stem.layers + g.body.layers] == ["linear", "lif"]
        with pytest.raises(ConfigError):
            build_mlp(0, (8,), 3)

    def test_eval_silent_sample_gets_zero_logits(self):
        g = build_visual(VisualModelConfig.desk(), seed=0).eval()
        res = g.forward_multistep(np.zeros((1, 3, 8, 8)), 2)
        assert res.counts.data.sum() == 0
        g.train()
        with pytest.raises(DegenerateEmbeddingError):
            g.forward_multistep(np.zeros((2, 3, 8, 8)), 2, np.random.default_rng(0))
