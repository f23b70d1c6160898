"""Bridge contracts: validation, capture/apply, live runs, transcript oracle."""

import dataclasses
import json

import numpy as np
import pytest

from sdbridge import BridgeConfig, BridgeError, EngineBridge, FakeCond, FakePipeline
from sdbridge.bridge import tensor_digest
from sdbridge.frames import decode_array, encode_array
from sdbridge import protocol
from sdbridge.protocol import Entry, unpack_step

import transcript


def make_config(port: int = 1, **kw) -> BridgeConfig:
    defaults = dict(
        model_id="fake",
        subject_token="<mug>",
        prompt="a <mug> in space",
        engine_port=port,
        attn_layer_map={
            "up_blocks.1.attn": 1,
            "up_blocks.2.attn": 2,
            "up_blocks.3.attn": 3,
        },
        feature_layer_map={"up_blocks.1.res": 2, "up_blocks.2.res": 3},
        total_steps=8,
        ama_step_start=1,
        ama_step_end=8,
        lambda_g=12.0,
        cfg_scale=3.0,
        pca_dim=16,
        seed=41,
    )
    defaults.update(kw)
    return BridgeConfig(**defaults)


def make_bridge(port: int, **kw) -> EngineBridge:
    bridge = EngineBridge(make_config(port, **kw), lambda: FakePipeline(seed=13, total_steps=8))
    ref = bridge.pipeline.register_cond(
        FakeCond(name="ref", subject_id="mug", center=(0.35, 0.4), size=0.4)
    )
    tgt = bridge.pipeline.register_cond(
        FakeCond(name="tgt", subject_id="mug", center=(0.6, 0.55), size=0.4)
    )
    bridge.set_conditions(ref, tgt, bridge.pipeline.null_cond)
    return bridge


class TestConfigValidation:
    def test_missing_attn_layer_fails_before_pipeline_load(self):
        loaded = []

        def factory():
            loaded.append(True)
            return FakePipeline()

        config = make_config(attn_layer_map={"up_blocks.1.attn": 1})
        with pytest.raises(BridgeError, match="attn_layer_map"):
            EngineBridge(config, factory)
        assert not loaded

    def test_missing_feature_layer_rejected(self):
        config = make_config(feature_layer_map={"up_blocks.1.res": 2})
        with pytest.raises(BridgeError, match="feature_layer_map"):
            EngineBridge(config, FakePipeline)

    def test_engine_config_text_mirrors_session_keys(self):
        text = make_config().engine_config_text()
        keys = {line.split("=")[0].strip() for line in text.splitlines()}
        assert {"total_steps", "ama_step_start", "ama_step_end", "descriptor_layers",
                "ama_layers", "lambda_c", "lambda_g", "cfg_scale", "pca_dim",
                "mask_threshold", "seed"} <= keys
        assert "descriptor_layers = 2,3" in text
        assert "ama_layers = 1,2,3" in text


class TestCapture:
    def test_first_iteration_builds_no_request(self):
        bridge = make_bridge(port=1)
        rng = np.random.default_rng(0)
        z = rng.standard_normal(bridge.pipeline.latent_shape)
        capture = bridge.capture_step(z, z, bridge.config.total_steps)
        assert capture.request is None
        assert set(capture.eps) == {"ref_uncond", "ref_cond", "tgt_uncond", "tgt_cond"}
        assert ("up_blocks.1.attn", "tgt_cond") in capture.qkv
        assert ("up_blocks.1.res", "ref_cond") in capture.features

    def test_second_iteration_carries_previous_features(self):
        bridge = make_bridge(port=1)
        rng = np.random.default_rng(1)
        z = rng.standard_normal(bridge.pipeline.latent_shape)
        t_first = bridge.config.total_steps
        first = bridge.capture_step(z, z, t_first)
        prev_feat = dict(first.features)
        second = bridge.capture_step(z, z, t_first - 1)
        assert second.request is not None
        t, entries = unpack_step(second.request)
        assert t == t_first - 1
        feature_entries = [e for e in entries if e.kind == protocol.K_FEATURE]
        assert len(feature_entries) == 4  # 2 layers x 2 branches
        name_for = {v: k for k, v in bridge.config.feature_layer_map.items()}
        for entry in feature_entries:
            branch = "ref_cond" if entry.branch == protocol.B_REF_COND else "tgt_cond"
            want = prev_feat[(name_for[entry.layer], branch)]
            assert entry.payload == encode_array(want)

    def test_capture_eps_equals_plain_pipeline(self):
        bridge = make_bridge(port=1)
        rng = np.random.default_rng(2)
        z_ref = rng.standard_normal(bridge.pipeline.latent_shape)
        z_tgt = rng.standard_normal(bridge.pipeline.latent_shape)
        capture = bridge.capture_step(z_ref, z_tgt, 4)
        plain = bridge.pipeline.predict_noise(z_tgt, 4, bridge.conds["tgt_cond"])
        np.testing.assert_array_equal(capture.eps["tgt_cond"], plain)

    def test_shape_table_mismatch_rejected(self):
        bridge = make_bridge(port=1, shape_table={"up_blocks.1.attn": (9, 9, 9)})
        rng = np.random.default_rng(3)
        z = rng.standard_normal(bridge.pipeline.latent_shape)
        with pytest.raises(BridgeError, match="expected"):
            bridge.capture_step(z, z, 8)

    def test_shape_table_match_accepted(self):
        bridge = make_bridge(port=1, shape_table={"up_blocks.1.attn": (6, 6, 8)})
        rng = np.random.default_rng(4)
        z = rng.standard_normal(bridge.pipeline.latent_shape)
        bridge.capture_step(z, z, 8)  # should not raise


class TestApplyResponse:
    def _capture(self, bridge):
        rng = np.random.default_rng(5)
        z = rng.standard_normal(bridge.pipeline.latent_shape)
        bridge.capture_step(z, z, 8)
        return bridge.capture_step(z, z, 7)

    def test_identity_values_and_zero_grads_change_nothing(self):
        bridge = make_bridge(port=1)
        capture = self._capture(bridge)
        reply = []
        for (name, branch), (_, _, v) in capture.qkv.items():
            if branch not in ("tgt_uncond", "tgt_cond"):
                continue
            tag = protocol.B_TGT_COND if branch == "tgt_cond" else protocol.B_TGT_UNCOND
            reply.append(
                Entry(protocol.K_VW, bridge.config.attn_layer_map[name], tag, encode_array(v))
            )
        zeros = np.zeros(bridge.pipeline.latent_shape, dtype=np.float32)
        for tag in (protocol.B_TGT_UNCOND, protocol.B_TGT_COND):
            reply.append(Entry(protocol.K_GRAD, 0, tag, encode_array(zeros)))
        patched = bridge.apply_response(reply, capture, 7)
        np.testing.assert_array_equal(patched["tgt_cond"], capture.eps["tgt_cond"])
        np.testing.assert_array_equal(patched["tgt_uncond"], capture.eps["tgt_uncond"])

    def test_grad_terms_subtract_from_noise(self):
        bridge = make_bridge(port=1)
        capture = self._capture(bridge)
        term = np.full(bridge.pipeline.latent_shape, 0.25, dtype=np.float32)
        reply = [Entry(protocol.K_GRAD, 0, protocol.B_TGT_COND, encode_array(term))]
        patched = bridge.apply_response(reply, capture, 7)
        np.testing.assert_allclose(
            patched["tgt_cond"], capture.eps["tgt_cond"] - 0.25, atol=1e-7
        )

    def test_value_injection_changes_noise_but_not_qk(self):
        bridge = make_bridge(port=1)
        capture = self._capture(bridge)
        name = "up_blocks.2.attn"
        _, _, v = capture.qkv[(name, "tgt_cond")]
        reply = [
            Entry(
                protocol.K_VW,
                bridge.config.attn_layer_map[name],
                protocol.B_TGT_COND,
                encode_array(v + 1.0),
            )
        ]
        patched = bridge.apply_response(reply, capture, 7)
        assert not np.array_equal(patched["tgt_cond"], capture.eps["tgt_cond"])

    def test_tampered_queries_detected(self):
        bridge = make_bridge(port=1)
        capture = self._capture(bridge)
        name = "up_blocks.2.attn"
        _, _, v = capture.qkv[(name, "tgt_cond")]
        reply = [
            Entry(
                protocol.K_VW,
                bridge.config.attn_layer_map[name],
                protocol.B_TGT_COND,
                encode_array(v + 1.0),
            )
        ]
        # swap the pipeline's query map between capture and patch passes
        q_map, k_map, v_map = bridge.pipeline._qkv_maps[name]
        other = bridge.pipeline._qkv_maps["up_blocks.1.attn"][0]
        bridge.pipeline._qkv_maps[name] = (
            lambda flat: q_map(flat) + 1.0, k_map, v_map,
        )
        with pytest.raises(BridgeError, match="changed"):
            bridge.apply_response(reply, capture, 7)


class TestLiveRuns:
    def test_engine_assisted_run_completes(self, engine_port):
        bridge = make_bridge(engine_port)
        rng = np.random.default_rng(99)
        ref_latent = rng.standard_normal(bridge.pipeline.latent_shape)
        bridge.connect(ref_latent)
        result = bridge.run(ref_latent)
        assert not result["engine_down"]
        assert result["steps"] == bridge.config.total_steps
        assert result["ref_recon_max_err"] < 1e-3
        assert result["final_latent"].shape == bridge.pipeline.latent_shape

    def test_lambda_c_zero_matches_baseline_bytes(self, engine_port):
        # M' is empty everywhere, so every patched step must equal baseline
        bridge = make_bridge(engine_port, lambda_c=0.0, lambda_g=12.0)
        rng = np.random.default_rng(99)
        ref_latent = rng.standard_normal(bridge.pipeline.latent_shape)
        bridge.connect(ref_latent)
        assisted = bridge.run(ref_latent)
        assert not assisted["engine_down"]

        baseline = make_bridge(engine_port)  # never connected -> pure pipeline
        base = baseline.run(ref_latent)
        assert encode_array(assisted["final_latent"]) == encode_array(base["final_latent"])

    def test_matching_changes_generation(self, engine_port):
        bridge = make_bridge(engine_port)
        rng = np.random.default_rng(99)
        ref_latent = rng.standard_normal(bridge.pipeline.latent_shape)
        bridge.connect(ref_latent)
        assisted = bridge.run(ref_latent)

        baseline = make_bridge(engine_port)
        base = baseline.run(ref_latent)
        assert not np.array_equal(assisted["final_latent"], base["final_latent"])

    def test_disconnect_falls_back_to_baseline(self, engine_port):
        bridge = make_bridge(engine_port)
        rng = np.random.default_rng(99)
        ref_latent = rng.standard_normal(bridge.pipeline.latent_shape)
        bridge.connect(ref_latent)
        bridge.client.sock.close()  # drop mid-session
        result = bridge.run(ref_latent)
        assert result["engine_down"]
        assert result["steps"] == bridge.config.total_steps

        baseline = make_bridge(engine_port)
        base = baseline.run(ref_latent)
        np.testing.assert_array_equal(result["final_latent"], base["final_latent"])


class TestTranscriptOracle:
    def test_recorded_transcript_replays_byte_for_byte(self, engine_port):
        if not transcript.FIXTURE.exists():
            pytest.fail("bridge transcript missing; run `python tests/transcript.py`")
        archived = transcript.read_transcript(transcript.FIXTURE)
        live = transcript.run_scripted(engine_port)
        assert len(live) == len(archived)
        for got, want in zip(live, archived):
            assert got.request == want.request
            assert got.reply == want.reply
            assert got.eps_uncond == want.eps_uncond
            assert got.eps_cond == want.eps_cond
            assert got.qk_hashes == want.qk_hashes

    def test_archived_hashes_cover_every_mapped_layer(self):
        if not transcript.FIXTURE.exists():
            pytest.fail("bridge transcript missing; run `python tests/transcript.py`")
        archived = transcript.read_transcript(transcript.FIXTURE)
        assert archived
        config = transcript.scripted_bridge(1)[0].config
        for trace in archived:
            names = {key.split("|")[0] for key in trace.qk_hashes}
            assert set(config.attn_layer_map) <= names

    def test_hashes_are_stable_digests(self):
        rng = np.random.default_rng(6)
        arr = rng.standard_normal((4, 4, 2))
        assert tensor_digest(arr) == tensor_digest(arr.copy())
        assert tensor_digest(arr) != tensor_digest(arr + 1e-9)
