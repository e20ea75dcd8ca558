import math
import socket
import struct
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ewir import link
from ewir.channel import ChannelConfig, FadingChannel
from ewir.codec import ComplexSymbolBlock
from ewir.experiment import build_models, from_values
from ewir.link import (BAD_CRC, BAD_MAGIC, BAD_VERSION, DeviceRuntime, FrameError, IncompleteFrame,
                       ServerRuntime, SymbolFrame, decode_frame, decode_reply, encode_error,
                       encode_frame, encode_result, make_proxy, make_server, send_block,
                       start_in_thread)


def _block(b=4, seed=0):
    rng = np.random.default_rng(seed)
    return ComplexSymbolBlock((rng.standard_normal(b) + 1j * rng.standard_normal(b)).astype(np.complex64))


def test_minimal_frame_layout():
    raw = encode_frame(ComplexSymbolBlock(np.array([1 + 2j], np.complex64)))
    assert len(raw) == 22
    assert raw[:4] == b"EWIR" and raw[4] == 1 and raw[5] == 0
    assert struct.unpack_from("<I", raw, 6) == (1,)
    assert struct.unpack_from("<ff", raw, 10) == (1.0, 2.0)
    assert struct.unpack_from("<I", raw, 18)[0] == zlib.crc32(raw[:18])
    assert len(encode_frame(ComplexSymbolBlock(np.array([1 + 2j])), h=0.5 - 1j)) == 30


@settings(max_examples=50, deadline=None)
@given(b=st.integers(1, 64), seed=st.integers(0, 2 ** 31), with_h=st.booleans())
def test_roundtrip_bitwise(b, seed, with_h):
    block = _block(b, seed)
    h = complex(np.float32(0.3), np.float32(-1.25)) if with_h else None
    frame, used = decode_frame(encode_frame(block, h))
    assert used == len(encode_frame(block, h))
    assert frame.h == h
    assert np.array_equal(frame.block.symbols.view(np.uint32), block.symbols.view(np.uint32))


def test_flipped_payload_byte_rejected():
    raw = bytearray(encode_frame(_block()))
    raw[14] ^= 0x40
    with pytest.raises(FrameError) as exc:
        decode_frame(bytes(raw))
    assert exc.value.reason == BAD_CRC


def test_header_errors_have_reason_codes():
    raw = encode_frame(_block())
    with pytest.raises(FrameError) as e1:
        decode_frame(b"XXXX" + raw[4:])
    with pytest.raises(FrameError) as e2:
        decode_frame(raw[:4] + b"\x02" + raw[5:])
    assert (e1.value.reason, e2.value.reason) == (BAD_MAGIC, BAD_VERSION)


@pytest.mark.parametrize("cut", [0, 3, 9, 10, 25])
def test_truncation_needs_more_bytes(cut):
    raw = encode_frame(_block())
    with pytest.raises(IncompleteFrame):
        decode_frame(raw[:cut])


def test_single_byte_corruption_always_detected():
    """Exhaustive over positions, randomized over values."""
    rng = np.random.default_rng(0)
    raw = encode_frame(_block(8), h=0.5 + 0.5j)
    undetected = 0
    for pos in range(len(raw)):
        for delta in rng.integers(1, 256, 40):
            bad = bytearray(raw)
            bad[pos] ^= int(delta)
            try:
                decode_frame(bytes(bad))
                undetected += 1
            except (FrameError, IncompleteFrame):
                pass
    assert undetected == 0


def test_reply_frames():
    raw = encode_result([3, 1], [0.75, 0.25])
    assert len(raw) == 39
    (kind, payload), used = decode_reply(raw)
    assert kind == "result" and used == 39 and payload == [(3, 0.75), (1, 0.25)]
    err = encode_error(BAD_CRC)
    assert len(err) == 10 and decode_reply(err)[0] == ("error", BAD_CRC)


def _tiny_pipeline():
    cfg = from_values({"model.units": "3", "model.widening": "6", "model.classes": "10", "model.split": "2",
                       "codec.symbols": "8", "data.variant": "cifar10"})
    return build_models(cfg).pipeline.eval()


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def servers():
    pipe = _tiny_pipeline()
    server = make_server(("127.0.0.1", 0), ServerRuntime(pipe.decoder, pipe.rest))
    start_in_thread(server)
    proxies = []

    def proxy(channel):
        p = make_proxy(("127.0.0.1", 0), server.server_address, channel)
        start_in_thread(p)
        proxies.append(p)
        return p.server_address

    yield pipe, server.server_address, proxy
    for s in [server] + proxies:
        s.shutdown()
        s.server_close()


def _in_process_logits(pipe, x):
    with torch.no_grad():
        return pipe.receive(pipe.transmit(x[None]))[0]


def test_server_logits_match_in_process_without_h(servers):
    pipe, _, _ = servers
    x = torch.randn(3, 32, 32)
    block = DeviceRuntime(pipe.front, pipe.encoder).symbols(x)
    logits = ServerRuntime(pipe.decoder, pipe.rest).logits(SymbolFrame(block))
    assert torch.allclose(logits, _in_process_logits(pipe, x), atol=1e-5, rtol=0)


@pytest.mark.parametrize("kind", ["awgn", "rayleigh"])
def test_loopback_noiseless_matches_in_process(servers, kind):
    pipe, _, proxy = servers
    address = proxy(ChannelConfig(kind, math.inf, seed=2))
    x = torch.randn(3, 32, 32)
    block = DeviceRuntime(pipe.front, pipe.encoder).symbols(x)
    kind_, top = send_block(address, block, timeout=10)
    assert kind_ == "result"
    probs = torch.softmax(_in_process_logits(pipe, x).double(), 0)
    ref = probs.topk(5)
    assert [c for c, _ in top] == ref.indices.tolist()
    assert np.allclose([p for _, p in top], ref.values.numpy(), atol=1e-5)


def test_proxy_residual_matches_channel_model(servers):
    """Proxy fading + server equalization leaves conj(h)/|h|^2 * n, as in-process."""
    pipe, _, _ = servers
    cfg = ChannelConfig("rayleigh", 10.0, seed=5)
    block = _block(8, 1)
    r = link.sample_realization(cfg, (0, 0), 8)
    zhat = link.fade(block.symbols.astype(np.complex128), r.h, r.noise)
    frame, _ = decode_frame(encode_frame(ComplexSymbolBlock(zhat.astype(np.complex64)), r.h))
    eq = link.equalize_symbols(frame.block.symbols.astype(np.complex128), frame.h)
    z = torch.from_numpy(block.symbols.astype(np.complex128))[None]
    ref = FadingChannel(cfg)(z, [(0, 0)])[0].numpy()
    assert np.allclose(eq, ref, atol=1e-5)


def test_garbage_then_valid_frame(servers):
    pipe, address, _ = servers
    block = DeviceRuntime(pipe.front, pipe.encoder).symbols(torch.randn(3, 32, 32))
    with socket.create_connection(address, timeout=10) as sock:
        sock.sendall(b"hello, not a frame" + encode_frame(block))
        buf = bytearray()
        replies = []
        while len(replies) < 2:
            try:
                reply, used = decode_reply(buf)
                replies.append(reply)
                del buf[:used]
            except IncompleteFrame:
                chunk = sock.recv(4096)
                assert chunk, "server closed early"
                buf.extend(chunk)
    assert replies[0] == ("error", BAD_MAGIC)
    assert replies[1][0] == "result" and len(replies[1][1]) == 5


def test_singular_channel_reply(servers):
    pipe, address, _ = servers
    with socket.create_connection(address, timeout=10) as sock:
        sock.sendall(encode_frame(_block(8), h=0j))
        reply = sock.recv(64)
    assert decode_reply(reply)[0] == ("error", link.SINGULAR_CHANNEL)


def test_connection_refused_reported():
    with pytest.raises(OSError):
        send_block(("127.0.0.1", _free_port()), _block(), timeout=2)
