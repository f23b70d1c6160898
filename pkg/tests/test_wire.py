"""Wire protocol: framing, handshake, step computation, golden transcript."""

import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semamatch import frames, wire
from semamatch.attention import matched_values
from semamatch.consistency import ConsistencyParams
from semamatch.grids import TensorGrid
from semamatch.guidance import NoiseSchedule, align_reference_z0, guidance_gradient, predict_z0
from semamatch.sampler import build_match_state

import wire_helpers


@pytest.fixture()
def server():
    srv = wire.serve(("127.0.0.1", 0))
    yield srv
    srv.shutdown()
    srv.server_close()


class TestFraming:
    def test_frame_layout(self):
        frame = wire.pack_frame(0x15, b"abc")
        assert frame == struct.pack("<IB", 4, 0x15) + b"abc"

    @given(
        st.lists(
            st.tuples(
                st.integers(1, 10),
                st.integers(0, 9),
                st.integers(0, 3),
                st.binary(max_size=64),
            ),
            max_size=8,
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_entry_list_roundtrip(self, raw):
        entries = [wire.StepEntry(k, l, b, p) for k, l, b, p in raw]
        decoded = wire.unpack_entries(wire.pack_entries(entries))
        assert decoded == entries

    @given(st.integers(1, 1000), st.binary(max_size=128))
    @settings(max_examples=50, deadline=None)
    def test_step_request_roundtrip(self, t, payload):
        entries = [wire.StepEntry(wire.K_FEATURE, 2, wire.B_REF_COND, payload)]
        got_t, got_entries = wire.unpack_step_request(wire.pack_step_request(t, entries))
        assert got_t == t and got_entries == entries

    def test_truncated_entries_rejected(self):
        packed = wire.pack_entries([wire.StepEntry(1, 2, 0, b"abcdef")])
        with pytest.raises(wire.ProtocolError):
            wire.unpack_entries(packed[:-2])

    def test_trailing_garbage_rejected(self):
        packed = wire.pack_entries([])
        with pytest.raises(wire.ProtocolError):
            wire.unpack_entries(packed + b"x")


class TestHandshake:
    def test_good_handshake_issues_session_id(self, server):
        client = wire.WireClient.connect("127.0.0.1", server.port)
        assert client.session_id >= 1
        client.end()
        client.close()

    def test_version_mismatch_rejected(self, server):
        with pytest.raises(wire.ProtocolError) as excinfo:
            wire.WireClient.connect("127.0.0.1", server.port, version=99)
        assert excinfo.value.code == wire.E_VERSION

    def test_bad_magic_gets_error_and_close(self, server):
        sock = socket.create_connection(("127.0.0.1", server.port))
        sock.sendall(b"XXXX" + struct.pack("<HB", wire.VERSION, 1))
        frame_type, payload = wire.read_frame(sock)
        assert frame_type == wire.T_ERROR
        assert payload[0] == wire.E_MALFORMED
        assert sock.recv(1) == b""  # server closed
        sock.close()

    def test_sessions_get_distinct_ids(self, server):
        a = wire.WireClient.connect("127.0.0.1", server.port)
        b = wire.WireClient.connect("127.0.0.1", server.port)
        assert a.session_id != b.session_id
        a.close()
        b.close()


class TestSessionStates:
    def test_step_before_config_rejected(self, server):
        client = wire.WireClient.connect("127.0.0.1", server.port)
        with pytest.raises(wire.ProtocolError) as excinfo:
            client.step(1, [])
        assert excinfo.value.code == wire.E_STATE
        client.close()

    def test_unknown_config_key_rejected(self, server):
        client = wire.WireClient.connect("127.0.0.1", server.port)
        with pytest.raises(wire.ProtocolError):
            client.send_config("lambda_q = 3\n")
        client.close()

    def test_step_without_features_rejected(self, server):
        client = wire.WireClient.connect("127.0.0.1", server.port)
        client.send_config(wire_helpers.CONFIG_TEXT)
        client.send_ref_latent(wire_helpers.scripted_ref_latent())
        with pytest.raises(wire.ProtocolError) as excinfo:
            client.step(3, [])
        assert excinfo.value.code == wire.E_SHAPE
        client.close()


class TestStepEquivalence:
    def test_wire_matches_in_process_byte_for_byte(self, server):
        step = 5
        entries, z_tgt, resp_ref, resp_tgt = wire_helpers.scripted_step_entries(step)
        ref_z0 = wire_helpers.scripted_ref_latent()
        sched_arr = np.linspace(1.0, 0.08, wire_helpers.SCRIPT_SPEC.total_steps + 1).astype(
            np.float32
        )

        client = wire.WireClient.connect("127.0.0.1", server.port)
        client.send_config(wire_helpers.CONFIG_TEXT)
        client.send_schedule(sched_arr)
        client.send_ref_latent(ref_z0)
        got_t, reply = client.step(step, entries)
        client.end()
        client.close()
        assert got_t == step

        # in-process oracle on identical tensors
        sched = NoiseSchedule(sched_arr.astype(np.float64))
        params = ConsistencyParams(lambda_c=0.4, mask_threshold=0.5)
        # decode through the frame layer exactly as the server does
        feats_ref = [
            frames.decode_grid(frames.encode_grid(resp_ref.decoder_features[l]))
            for l in (2, 3)
        ]
        feats_tgt = [
            frames.decode_grid(frames.encode_grid(resp_tgt.decoder_features[l]))
            for l in (2, 3)
        ]
        cross = [frames.decode_grid(frames.encode_grid(resp_tgt.cross_attn_maps[0]))]
        z_tgt_wire = frames.decode_grid(frames.encode_grid(z_tgt))
        ref_z0_wire = frames.decode_grid(frames.encode_grid(ref_z0))
        match = build_match_state(
            feats_ref, feats_tgt, cross,
            (z_tgt_wire.height, z_tgt_wire.width), pca_dim=16, params=params,
        )

        by_key = {(e.kind, e.layer, e.branch): e for e in reply}
        assert np.array_equal(
            frames.decode_mask(by_key[(wire.K_MPRIME, 0, wire.B_TGT_COND)].payload).values,
            match.mask_mprime.values,
        )
        for layer in (1, 2):
            v_ref = frames.decode_grid(
                frames.encode_grid(resp_ref.attention_tensors[layer][2])
            )
            v_tgt = frames.decode_grid(
                frames.encode_grid(resp_tgt.attention_tensors[layer][2])
            )
            want = matched_values(
                v_ref, v_tgt,
                match.flow_at(v_tgt.height, v_tgt.width),
                match.mprime_at(v_tgt.height, v_tgt.width),
            )
            got = by_key[(wire.K_VW, layer, wire.B_TGT_COND)]
            assert got.payload == frames.encode_grid(want)

        flow_lat = match.flow_at(ref_z0_wire.height, ref_z0_wire.width)
        mprime_lat = match.mprime_at(ref_z0_wire.height, ref_z0_wire.width)
        z0_aligned = align_reference_z0(ref_z0_wire, flow_lat)
        for branch, eps_resp in (
            (wire.B_TGT_UNCOND, resp_ref.eps),
            (wire.B_TGT_COND, resp_tgt.eps),
        ):
            eps_grid = frames.decode_grid(frames.encode_grid(eps_resp))
            z0_hat = predict_z0(z_tgt_wire, eps_grid, step, sched)
            grad = guidance_gradient(z0_aligned, z0_hat, mprime_lat, step, sched)
            term = TensorGrid(7.5 * sched.sigma(step) * grad.data)
            got = by_key[(wire.K_GRAD, 0, branch)]
            assert got.payload == frames.encode_grid(term)


class TestGoldenTranscript:
    def test_replay_is_byte_identical(self):
        if not wire_helpers.FIXTURE.exists():
            pytest.fail(
                "golden transcript missing; run `python tests/wire_helpers.py`"
            )
        records = wire_helpers.read_transcript(wire_helpers.FIXTURE)
        client_units = [blob for kind, blob in records if kind == 0]
        expected = [blob for kind, blob in records if kind == 1]
        server = wire.serve(("127.0.0.1", 0))
        try:
            replies = wire_helpers.drive_session(client_units, server.port)
        finally:
            server.shutdown()
            server.server_close()
        assert len(replies) == len(expected)
        for got, want in zip(replies, expected):
            assert got == want


class TestDisconnect:
    def test_mid_session_disconnect_leaves_server_alive(self, server):
        sock = socket.create_connection(("127.0.0.1", server.port))
        sock.sendall(wire.MAGIC + struct.pack("<HB", wire.VERSION, 1))
        wire.read_frame(sock)
        sock.close()  # drop without END
        client = wire.WireClient.connect("127.0.0.1", server.port)
        client.end()
        client.close()
