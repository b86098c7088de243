"""Reference guidance-provider process speaking the wire protocol.

Serves a mock oracle (target-image gradients) over stdio or a TCP/unix
socket. Real diffusion backends can reuse `serve_connection` with their own
handler.

    python -m splatworld.provider --targets DIR --stdio
    python -m splatworld.provider --targets DIR --listen 127.0.0.1:7060
"""
from __future__ import annotations

import argparse
import os
import socket
import sys

import numpy as np

from .guidance import MockOracleProvider, serve_connection


def load_targets(directory: str) -> dict:
    """Target images keyed by view bucket: front/side/back.{png,npy}."""
    from .sceneio import load_image

    targets = {}
    for name in os.listdir(directory):
        stem, ext = os.path.splitext(name)
        if stem in ("front", "side", "back") and ext in (".png", ".npy"):
            targets[stem] = load_image(os.path.join(directory, name))
    if not targets:
        raise FileNotFoundError(f"no front/side/back target images in {directory}")
    return targets


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="mock guidance provider")
    ap.add_argument("--targets", required=True, help="directory with front/side/back images")
    mode = ap.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stdio", action="store_true", help="serve one session over stdin/stdout")
    mode.add_argument("--listen", help="serve over a TCP socket, host:port")
    args = ap.parse_args(argv)

    handler = MockOracleProvider(load_targets(args.targets))

    if args.stdio:
        serve_connection(handler, sys.stdin.buffer.read, lambda b: (sys.stdout.buffer.write(b), sys.stdout.buffer.flush()))
        return 0

    host, _, port = args.listen.rpartition(":")
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host or "127.0.0.1", int(port)))
    srv.listen(1)
    print(f"listening on {srv.getsockname()[0]}:{srv.getsockname()[1]}", flush=True)
    while True:
        conn, _ = srv.accept()
        with conn:
            serve_connection(handler, conn.recv, conn.sendall)


if __name__ == "__main__":
    sys.exit(main())
