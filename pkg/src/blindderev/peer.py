"""Minimal score-model peer speaking the SCM1 protocol on stdin/stdout or TCP.

Run ``python -m blindderev.peer --help``. The ``gaussian`` behaviour serves
the exact score of an independent Gaussian; the remaining behaviours exist to
exercise client error handling.
"""

from __future__ import annotations

import argparse
import socket
import sys
import time

import numpy as np

from .prior import MalformedFrame, encode_error, encode_response, read_request

BEHAVIOURS = ("gaussian", "zero", "wrong-length", "error", "crash", "hang", "garbage")


def _load(value: str) -> np.ndarray:
    try:
        return np.asarray(float(value))
    except ValueError:
        return np.load(value).astype(np.float64)


def make_handler(behaviour: str, mean: np.ndarray, var: np.ndarray, error_code: int = 7):
    def handle(x: np.ndarray, sigma: float) -> bytes:
        if x.size == 0:
            return encode_response(x)
        if behaviour == "gaussian":
            return encode_response(-(x - mean) / (var + sigma**2))
        if behaviour == "zero":
            return encode_response(np.zeros_like(x))
        if behaviour == "wrong-length":
            return encode_response(np.zeros(x.size + 1))
        if behaviour == "error":
            return encode_error(error_code)
        if behaviour == "crash":
            sys.exit(3)
        if behaviour == "hang":
            time.sleep(3600)
        return b"JUNK" + bytes(8)

    return handle


def _serve(read_exact, write, handle) -> None:
    while True:
        try:
            req = read_request(read_exact)
        except MalformedFrame:
            write(encode_error(1))
            return
        if req is None:
            return
        write(handle(*req))


def serve_stdio(handle) -> None:
    rd, wr = sys.stdin.buffer, sys.stdout.buffer

    def read_exact(n):
        buf = rd.read(n)
        if buf and len(buf) < n:
            raise MalformedFrame("truncated request")
        return buf

    def write(data):
        wr.write(data)
        wr.flush()

    _serve(read_exact, write, handle)


def serve_tcp(host: str, port: int, handle, ready=None) -> None:
    with socket.create_server((host, port)) as srv:
        if ready is not None:
            ready(srv.getsockname()[1])
        conn, _ = srv.accept()
        with conn:
            f = conn.makefile("rb")

            def read_exact(n):
                buf = f.read(n)
                if buf and len(buf) < n:
                    raise MalformedFrame("truncated request")
                return buf

            _serve(read_exact, conn.sendall, handle)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m blindderev.peer", description=__doc__.splitlines()[0])
    ap.add_argument("--behaviour", choices=BEHAVIOURS, default="gaussian")
    ap.add_argument("--mean", default="0.0", help="scalar or path to a .npy array")
    ap.add_argument("--var", default="0.0025", help="scalar or path to a .npy array")
    ap.add_argument("--error-code", type=int, default=7)
    ap.add_argument("--listen", metavar="HOST:PORT", help="serve one TCP client instead of stdio")
    args = ap.parse_args(argv)
    handle = make_handler(args.behaviour, _load(args.mean), _load(args.var), args.error_code)
    if args.listen:
        host, port = args.listen.rsplit(":", 1)
        serve_tcp(host, int(port), handle, ready=lambda p: print(p, file=sys.stderr, flush=True))
    else:
        serve_stdio(handle)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
