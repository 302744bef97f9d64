"""Score models: the interface, an exact Gaussian prior, and an out-of-process client.

Wire protocol (little-endian, one request in flight per connection)::

    request   b"SCM1" | u32 length | f64 sigma | length * f32 samples
    response  b"SCM1" | u32 length | length * f32 score
    error     b"SCER" | u32 code

A zero-length request is the handshake; the peer must answer with a
zero-length response.
"""

from __future__ import annotations

import os
import select
import shlex
import socket
import struct
import subprocess
import time
import warnings
from typing import Optional, Sequence, Union

import numpy as np
import torch

__all__ = [
    "ScoreModel",
    "GaussianPrior",
    "OracleScore",
    "ExternalScoreModel",
    "ProtocolError",
    "ScoreTimeout",
    "MalformedFrame",
    "LengthMismatch",
    "PeerCrashed",
    "PeerError",
    "denoise_one_step",
    "gaussian_score",
    "rescale_estimate",
    "encode_request",
    "encode_response",
    "encode_error",
    "read_request",
    "MAGIC",
    "ERROR_MAGIC",
]

MAGIC = b"SCM1"
ERROR_MAGIC = b"SCER"


class ScoreModel:
    """``score(x, sigma)`` estimates the gradient of log p_sigma at ``x``.

    ``differentiable`` tells the sampler whether autograd can pass through
    :meth:`score`; when it cannot, the denoised estimate is treated as having
    an identity Jacobian.
    """

    differentiable = False

    def score(self, x: torch.Tensor, sigma: float) -> torch.Tensor:
        raise NotImplementedError

    def close(self) -> None:
        pass


class GaussianPrior(ScoreModel):
    """Independent Gaussian per sample; its sigma-smoothed score is exact.

    Scalar ``mean`` and ``variances`` apply to signals of any length.
    """

    differentiable = True

    def __init__(self, mean, variances):
        self.mean = torch.as_tensor(mean, dtype=torch.float64)
        self.variances = torch.as_tensor(variances, dtype=torch.float64).expand_as(self.mean).clone()
        if not torch.all(self.variances > 0):
            raise ValueError("variances must be positive")

    def score(self, x: torch.Tensor, sigma: float) -> torch.Tensor:
        return gaussian_score(self, x, sigma)

    def posterior_mean(self, x: torch.Tensor, sigma: float) -> torch.Tensor:
        c = self.variances
        return (c * x + sigma**2 * self.mean) / (c + sigma**2)

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        noise = torch.randn(self.mean.shape, generator=generator, dtype=torch.float64)
        return self.mean + self.variances.sqrt() * noise


class OracleScore(ScoreModel):
    """Score of a point mass at a known clean signal; its denoiser returns that signal."""

    differentiable = True

    def __init__(self, clean):
        self.clean = torch.as_tensor(clean, dtype=torch.float64)

    def score(self, x: torch.Tensor, sigma: float) -> torch.Tensor:
        if sigma <= 0:
            raise ValueError("oracle score needs sigma > 0")
        return (self.clean - x) / sigma**2


def gaussian_score(g: GaussianPrior, x: torch.Tensor, sigma: float) -> torch.Tensor:
    if g.mean.dim() and x.shape[-1] != g.mean.shape[-1]:
        raise ValueError(f"length {x.shape[-1]} does not match prior length {g.mean.shape[-1]}")
    return -(x - g.mean) / (g.variances + sigma**2)


def denoise_one_step(x: torch.Tensor, sigma: float, model: ScoreModel, score: Optional[torch.Tensor] = None):
    """Tweedie estimate ``x + sigma^2 * score(x, sigma)``, the posterior mean of the clean signal."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if score is None:
        score = model.score(x, sigma)
    return x + sigma**2 * score


def rescale_estimate(x: torch.Tensor, sigma_data: float = 5e-2) -> torch.Tensor:
    """Scale ``x`` so its empirical standard deviation (over the last axis) is ``sigma_data``."""
    std = x.std(dim=-1, correction=0, keepdim=True)
    if torch.any(std == 0):
        warnings.warn("rescale_estimate: zero-variance estimate left unscaled", RuntimeWarning)
        std = torch.where(std == 0, torch.full_like(std, sigma_data), std)
    return x * (sigma_data / std)


# -- wire format ------------------------------------------------------------


class ProtocolError(RuntimeError):
    pass


class ScoreTimeout(ProtocolError):
    pass


class MalformedFrame(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class PeerCrashed(ProtocolError):
    pass


class PeerError(ProtocolError):
    def __init__(self, code: int):
        super().__init__(f"peer reported error code {code}")
        self.code = code


def encode_request(samples: np.ndarray, sigma: float) -> bytes:
    samples = np.ascontiguousarray(samples, dtype="<f4").ravel()
    return MAGIC + struct.pack("<Id", samples.size, sigma) + samples.tobytes()


def encode_response(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4").ravel()
    return MAGIC + struct.pack("<I", values.size) + values.tobytes()


def encode_error(code: int) -> bytes:
    return ERROR_MAGIC + struct.pack("<I", code)


def read_request(read_exact):
    """Parse one request using ``read_exact(n) -> bytes``; returns ``(samples, sigma)`` or ``None`` on EOF."""
    magic = read_exact(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    n, sigma = struct.unpack("<Id", read_exact(12))
    data = read_exact(4 * n)
    return np.frombuffer(data, dtype="<f4").astype(np.float64), sigma


class _PipeTransport:
    def __init__(self, command: Union[str, Sequence[str]]):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        self.rfd = self.proc.stdout.fileno()

    def send(self, data: bytes) -> None:
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise PeerCrashed(f"peer closed its input: {exc}") from exc

    def recv(self, n: int, deadline: float) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            left = deadline - time.monotonic()
            if left <= 0:
                raise ScoreTimeout("score model did not answer in time")
            ready, _, _ = select.select([self.rfd], [], [], left)
            if not ready:
                continue
            chunk = os.read(self.rfd, n - len(buf))
            if not chunk:
                raise PeerCrashed(f"peer exited (returncode {self.proc.poll()})")
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self.proc.stdout.close()


class _SocketTransport:
    def __init__(self, host: str, port: int, timeout: float):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise PeerCrashed(str(exc)) from exc

    def recv(self, n: int, deadline: float) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            left = deadline - time.monotonic()
            if left <= 0:
                raise ScoreTimeout("score model did not answer in time")
            self.sock.settimeout(left)
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout as exc:
                raise ScoreTimeout("score model did not answer in time") from exc
            if not chunk:
                raise PeerCrashed("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        self.sock.close()


class ExternalScoreModel(ScoreModel):
    """Score model served by another process over the ``SCM1`` protocol.

    ``target`` is either a command line (the peer speaks on stdin/stdout) or
    ``"tcp:<host>:<port>"``.
    """

    differentiable = False

    def __init__(self, target: Union[str, Sequence[str]], timeout: float = 30.0):
        self.timeout = timeout
        if isinstance(target, str) and target.startswith("tcp:"):
            _, host, port = target.split(":")
            self._io = _SocketTransport(host, int(port), timeout)
        else:
            self._io = _PipeTransport(target)
        try:
            self._exchange(np.zeros(0), 0.0)
        except Exception:
            self._io.close()
            raise

    def _exchange(self, samples: np.ndarray, sigma: float) -> np.ndarray:
        deadline = time.monotonic() + self.timeout
        self._io.send(encode_request(samples, sigma))
        magic = self._io.recv(4, deadline)
        if magic == ERROR_MAGIC:
            (code,) = struct.unpack("<I", self._io.recv(4, deadline))
            raise PeerError(code)
        if magic != MAGIC:
            raise MalformedFrame(f"bad magic {magic!r}")
        (n,) = struct.unpack("<I", self._io.recv(4, deadline))
        if n != samples.size:
            raise LengthMismatch(f"sent {samples.size} samples, peer answered {n}")
        payload = self._io.recv(4 * n, deadline)
        return np.frombuffer(payload, dtype="<f4").astype(np.float64)

    def score(self, x: torch.Tensor, sigma: float) -> torch.Tensor:
        x = x.detach()
        if x.numel() == 0:
            return torch.zeros_like(x)
        flat = x.reshape(-1, x.shape[-1]).cpu().numpy()
        rows = [self._exchange(row, float(sigma)) for row in flat]
        return torch.from_numpy(np.stack(rows)).reshape(x.shape).to(x.dtype)

    def close(self) -> None:
        self._io.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
