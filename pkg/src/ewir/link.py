"""Device/server runtime over a TCP byte stream, plus a channel-emulating proxy.

Symbol frame (device -> proxy -> server), little-endian::

    "EWIR" | version:u8 = 1 | flags:u8 (bit0: h present) | B:u32
    [h.real:f32 h.imag:f32]             if flags & 1
    B x f32 real parts, B x f32 imag parts
    crc32(everything above):u32

Reply frames (server -> device)::

    result: "EWIR" | 0x10 | 5 x (class:u16, prob:f32) | crc32:u32
    error:  "EWIR" | 0x11 | reason:u8 | crc32:u32

Result slots past the class count carry class 0xFFFF with probability 0.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass
from itertools import count
from typing import Callable

import numpy as np
import torch
from torch import nn

from .channel import ChannelConfig, SingularChannelError, equalize_symbols, fade, sample_realization
from .codec import ComplexSymbolBlock, complex_to_reals, normalize_power

log = logging.getLogger(__name__)

MAGIC = b"EWIR"
VERSION = 1
FLAG_H = 0x01
MAX_SYMBOLS = 1 << 24
REPLY_RESULT = 0x10
REPLY_ERROR = 0x11
TOP_K = 5
NO_CLASS = 0xFFFF

_HEAD = struct.Struct("<4sBBI")
_H = struct.Struct("<ff")
_CRC = struct.Struct("<I")
_SLOT = struct.Struct("<Hf")
RESULT_SIZE = 5 + TOP_K * _SLOT.size + _CRC.size
ERROR_SIZE = 5 + 1 + _CRC.size

# reason codes
BAD_MAGIC, BAD_VERSION, BAD_CRC, BAD_LENGTH, SERVER_ERROR, SINGULAR_CHANNEL, BAD_TYPE = range(1, 8)
REASONS = {BAD_MAGIC: "bad magic", BAD_VERSION: "bad version", BAD_CRC: "bad crc",
           BAD_LENGTH: "bad length", SERVER_ERROR: "server error",
           SINGULAR_CHANNEL: "singular channel", BAD_TYPE: "bad reply type"}


class FrameError(ValueError):
    def __init__(self, reason: int, detail: str = ""):
        self.reason = reason
        super().__init__(f"{REASONS.get(reason, reason)}{': ' + detail if detail else ''}")


class IncompleteFrame(Exception):
    """Not enough bytes yet; ``needed`` is the total frame size when known."""

    def __init__(self, needed: int | None = None):
        self.needed = needed
        super().__init__(f"need {needed or 'more'} bytes")


@dataclass
class SymbolFrame:
    block: ComplexSymbolBlock
    h: complex | None = None


def encode_frame(block: ComplexSymbolBlock, h: complex | None = None) -> bytes:
    b = block.num_symbols
    if not 0 < b <= MAX_SYMBOLS:
        raise ValueError(f"symbol count {b} outside (0, {MAX_SYMBOLS}]")
    parts = [_HEAD.pack(MAGIC, VERSION, FLAG_H if h is not None else 0, b)]
    if h is not None:
        parts.append(_H.pack(h.real, h.imag))
    parts.append(np.ascontiguousarray(complex_to_reals(block.symbols), dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def frame_size(buf: bytes) -> int:
    """Total size of the symbol frame at the start of ``buf`` (header checks only)."""
    if len(buf) < _HEAD.size:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise FrameError(BAD_MAGIC)
        raise IncompleteFrame()
    magic, version, flags, b = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(BAD_MAGIC)
    if version != VERSION:
        raise FrameError(BAD_VERSION, f"got {version}")
    if not 0 < b <= MAX_SYMBOLS or flags & ~FLAG_H:
        raise FrameError(BAD_LENGTH, f"B={b} flags={flags:#x}")
    return _HEAD.size + (_H.size if flags & FLAG_H else 0) + 8 * b + _CRC.size


def decode_frame(buf: bytes) -> tuple[SymbolFrame, int]:
    """Decode one frame from the start of ``buf``; returns (frame, bytes consumed)."""
    size = frame_size(buf)
    if len(buf) < size:
        raise IncompleteFrame(size)
    body = bytes(buf[:size - _CRC.size])
    (crc,) = _CRC.unpack_from(buf, size - _CRC.size)
    if zlib.crc32(body) != crc:
        raise FrameError(BAD_CRC)
    _, _, flags, b = _HEAD.unpack_from(body)
    off = _HEAD.size
    h = None
    if flags & FLAG_H:
        hr, hi = _H.unpack_from(body, off)
        h = complex(hr, hi)
        off += _H.size
    reals = np.frombuffer(body, dtype="<f4", count=2 * b, offset=off).astype(np.float32)
    z = np.empty(b, dtype=np.complex64)
    z.real, z.imag = reals[:b], reals[b:]
    return SymbolFrame(ComplexSymbolBlock(z), h), size


def encode_result(classes: list[int], probs: list[float]) -> bytes:
    slots = list(zip(classes, probs))[:TOP_K]
    slots += [(NO_CLASS, 0.0)] * (TOP_K - len(slots))
    body = MAGIC + bytes([REPLY_RESULT]) + b"".join(_SLOT.pack(c, p) for c, p in slots)
    return body + _CRC.pack(zlib.crc32(body))


def encode_error(reason: int) -> bytes:
    body = MAGIC + bytes([REPLY_ERROR, reason])
    return body + _CRC.pack(zlib.crc32(body))


def decode_reply(buf: bytes) -> tuple[tuple[str, object], int]:
    """Returns (("result", [(class, prob), ...]) or ("error", reason), consumed)."""
    if len(buf) < 5:
        raise IncompleteFrame()
    if buf[:4] != MAGIC:
        raise FrameError(BAD_MAGIC)
    kind = buf[4]
    size = {REPLY_RESULT: RESULT_SIZE, REPLY_ERROR: ERROR_SIZE}.get(kind)
    if size is None:
        raise FrameError(BAD_TYPE, f"type {kind:#x}")
    if len(buf) < size:
        raise IncompleteFrame(size)
    body = bytes(buf[:size - 4])
    if zlib.crc32(body) != _CRC.unpack_from(buf, size - 4)[0]:
        raise FrameError(BAD_CRC)
    if kind == REPLY_ERROR:
        return ("error", body[5]), size
    slots = [_SLOT.unpack_from(body, 5 + i * _SLOT.size) for i in range(TOP_K)]
    return ("result", [(c, p) for c, p in slots if c != NO_CLASS]), size


def _resync(buf: bytearray) -> bytes:
    """Drop bytes up to the next possible magic; returns the dropped bytes."""
    nxt = buf.find(MAGIC, 1)
    if nxt < 0:
        # keep a tail that could be the start of a magic
        keep = next((k for k in (3, 2, 1) if len(buf) >= k and MAGIC.startswith(bytes(buf[-k:]))), 0)
        nxt = len(buf) - keep
        nxt = max(nxt, 1)
    dropped = bytes(buf[:nxt])
    del buf[:nxt]
    return dropped


def _recv_into(sock: socket.socket, buf: bytearray) -> bool:
    chunk = sock.recv(65536)
    if not chunk:
        return False
    buf.extend(chunk)
    return True


# --- runtimes ------------------------------------------------------------------

class DeviceRuntime:
    """Front half + compression encoder: image tensor -> normalized symbol block."""

    def __init__(self, front: nn.Module, encoder: nn.Module, power: float = 1.0):
        self.front = front.eval()
        self.encoder = encoder.eval()
        self.power = power

    @torch.no_grad()
    def symbols(self, x: torch.Tensor) -> ComplexSymbolBlock:
        z = normalize_power(self.encoder(self.front(x[None] if x.dim() == 3 else x)), self.power)[0]
        return ComplexSymbolBlock(z.numpy().astype(np.complex64), self.power)


class ServerRuntime:
    """Equalizer + compression decoder + rest half: received frame -> logits."""

    def __init__(self, decoder: nn.Module, rest: nn.Module):
        self.decoder = decoder.eval()
        self.rest = rest.eval()

    @torch.no_grad()
    def logits(self, frame: SymbolFrame) -> torch.Tensor:
        h = np.complex64(frame.h if frame.h is not None else 1.0)
        z = equalize_symbols(frame.block.symbols, h).astype(np.complex64)
        code = torch.from_numpy(complex_to_reals(z).astype(np.float32))[None]
        return self.rest(self.decoder(code))[0]

    def reply(self, frame: SymbolFrame) -> bytes:
        try:
            logits = self.logits(frame)
        except SingularChannelError:
            return encode_error(SINGULAR_CHANNEL)
        probs = torch.softmax(logits.double(), dim=0)
        top = probs.topk(min(TOP_K, probs.numel()))
        return encode_result([int(i) for i in top.indices], [float(p) for p in top.values])


class _ThreadingServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


def serve_frames(sock: socket.socket, on_frame: Callable[[SymbolFrame, bytes], bytes | None],
                 on_garbage: Callable[[bytes, FrameError], bytes | None]) -> None:
    """Read frames from ``sock`` until EOF, sending whatever the callbacks return."""
    buf = bytearray()
    while True:
        try:
            frame, used = decode_frame(buf)
        except IncompleteFrame:
            if not _recv_into(sock, buf):
                return
            continue
        except FrameError as err:
            out = on_garbage(_resync(buf), err)
            if out:
                sock.sendall(out)
            continue
        raw = bytes(buf[:used])
        del buf[:used]
        out = on_frame(frame, raw)
        if out:
            sock.sendall(out)


def make_server(address: tuple[str, int], runtime: ServerRuntime) -> socketserver.TCPServer:
    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            serve_frames(self.request, lambda f, raw: runtime.reply(f),
                         lambda junk, err: encode_error(err.reason))

    return _ThreadingServer(address, Handler)


def make_proxy(address: tuple[str, int], upstream: tuple[str, int],
               channel: ChannelConfig) -> socketserver.TCPServer:
    """Apply the block-fading channel to every frame in flight and stamp h into it.

    Each accepted session gets the next session index; frame ``j`` of session
    ``s`` draws from stream key (s, j). Bytes that do not parse as a frame are
    forwarded unchanged so the server can reject them.
    """
    sessions = count()
    lock = threading.Lock()

    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            with lock:
                session = next(sessions)
            up = socket.create_connection(upstream)
            pump = threading.Thread(target=_pump, args=(up, self.request), daemon=True)
            pump.start()
            frames = count()

            def on_frame(frame: SymbolFrame, raw: bytes) -> None:
                r = sample_realization(channel, (session, next(frames)), frame.block.num_symbols)
                zhat = fade(frame.block.symbols.astype(np.complex128), r.h, r.noise)
                up.sendall(encode_frame(ComplexSymbolBlock(zhat.astype(np.complex64)), r.h))

            def on_garbage(junk: bytes, err: FrameError) -> None:
                up.sendall(junk)

            try:
                serve_frames(self.request, on_frame, on_garbage)
            finally:
                try:
                    up.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                pump.join(timeout=5)
                up.close()

    return _ThreadingServer(address, Handler)


def _pump(src: socket.socket, dst: socket.socket) -> None:
    try:
        while chunk := src.recv(65536):
            dst.sendall(chunk)
    except OSError:
        pass


def send_block(address: tuple[str, int], block: ComplexSymbolBlock, timeout: float = 30.0):
    """Send one frame and wait for the reply; returns the decoded reply tuple."""
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(encode_frame(block))
        buf = bytearray()
        while True:
            try:
                reply, _ = decode_reply(buf)
                return reply
            except IncompleteFrame:
                if not _recv_into(sock, buf):
                    raise ConnectionError("server closed the connection before replying")


def start_in_thread(server: socketserver.TCPServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    return t
