"""Score-distillation gradients and pluggable denoisers.

A denoiser predicts the noise in a noised rendering. Three providers ship:

* ``PerfectDenoiser`` regenerates the injected noise from its seed, so the
  SDS residual is exactly zero (a no-op guidance signal for testing).
* ``LinearDenoiser`` predicts ``A * x_t``; its SDS expectation has a closed
  form, which makes it useful for statistical checks.
* ``RemoteDenoiser`` talks to an external diffusion service over HTTP.

Noise for a request is always ``noise_from_seed(seed, shape)``, which is
what lets a provider reproduce it from the seed alone.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class DenoiserError(RuntimeError):
    pass


def noise_from_seed(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(int(seed)).standard_normal(shape)


def cosine_alpha_bar(t: float) -> float:
    """Variance-preserving cosine schedule, ``alpha_bar(0) = 1``, ``alpha_bar(1) = 0``."""
    return math.cos(0.5 * math.pi * t) ** 2


SCHEDULES = {"cosine": cosine_alpha_bar, "linear": lambda t: 1.0 - t}


def _as_hwc(x: np.ndarray) -> np.ndarray:
    return x[..., None] if x.ndim == 2 else x


class Denoiser:
    """Base class: predicts the noise contained in ``x_t``."""

    schedule: str = "cosine"

    def alpha_bar(self, t: float) -> float:
        return SCHEDULES[self.schedule](t)

    def predict(self, kind: str, x_t: np.ndarray, t: float, seed: int) -> np.ndarray:
        raise NotImplementedError


class PerfectDenoiser(Denoiser):
    def predict(self, kind, x_t, t, seed):
        return noise_from_seed(seed, np.shape(x_t))


class LinearDenoiser(Denoiser):
    def __init__(self, A: Union[float, np.ndarray] = 0.5, schedule: str = "cosine"):
        self.A = np.asarray(A, dtype=np.float64)
        self.schedule = schedule

    def predict(self, kind, x_t, t, seed):
        return self.A * np.asarray(x_t, dtype=np.float64)


def encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def decode_array(s: str, shape) -> np.ndarray:
    raw = base64.b64decode(s)
    a = np.frombuffer(raw, dtype="<f4")
    if a.size != int(np.prod(shape)):
        raise DenoiserError(f"payload holds {a.size} values, expected shape {tuple(shape)}")
    return a.reshape(shape).astype(np.float64)


def encode_request(kind: str, x_t: np.ndarray, t: float, seed: int) -> dict:
    x = _as_hwc(np.asarray(x_t))
    h, w, c = x.shape
    return {"kind": kind, "data": encode_array(x), "h": h, "w": w, "c": c, "t": float(t), "seed": int(seed)}


def decode_request(body: dict):
    shape = (int(body["h"]), int(body["w"]), int(body["c"]))
    if body.get("kind") not in ("image", "depth"):
        raise DenoiserError(f"unknown kind {body.get('kind')!r}")
    return body["kind"], decode_array(body["data"], shape), float(body["t"]), int(body["seed"])


class RemoteDenoiser(Denoiser):
    """Client for ``POST /denoise`` on an external diffusion service."""

    def __init__(self, url: str, timeout: float = 30.0, schedule: str = "cosine"):
        self.url = url.rstrip("/")
        if not self.url.endswith("/denoise"):
            self.url += "/denoise"
        self.timeout = timeout
        self.schedule = schedule

    def predict(self, kind, x_t, t, seed):
        x = np.asarray(x_t)
        payload = json.dumps(encode_request(kind, x, t, seed)).encode()
        req = urllib.request.Request(self.url, data=payload, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise DenoiserError(f"denoiser request failed: {exc}") from exc
        if "eps" not in body:
            raise DenoiserError("denoiser response has no 'eps' field")
        return decode_array(body["eps"], _as_hwc(x).shape).reshape(x.shape)


def make_denoiser(name: Optional[str], linear_a: float = 0.5) -> Optional[Denoiser]:
    """``perfect``, ``linear``, an ``http(s)://`` URL, or None/``none``."""
    if name is None or name == "none":
        return None
    if name == "perfect":
        return PerfectDenoiser()
    if name == "linear":
        return LinearDenoiser(linear_a)
    if name.startswith(("http://", "https://")):
        return RemoteDenoiser(name)
    raise ValueError(f"unknown denoiser {name!r}")


def serve_denoiser(provider: Denoiser, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server exposing ``provider`` with the ``/denoise`` wire format.

    The caller runs ``server.serve_forever()`` (typically in a thread) and
    ``server.shutdown()`` when done.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path.rstrip("/") != "/denoise":
                self.send_error(404)
                return
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                kind, x_t, t, seed = decode_request(body)
                eps = provider.predict(kind, x_t, t, seed)
                out = json.dumps({"eps": encode_array(eps)}).encode()
            except (KeyError, ValueError, DenoiserError) as exc:
                self.send_error(400, str(exc))
                return
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


@dataclass
class SDSConfig:
    t_range: Tuple[float, float] = (0.02, 0.5)
    weight: Union[float, Callable[[float], float]] = 1.0
    interval: int = 10
    resolution_scale: float = 0.5


@dataclass
class SDSResult:
    grad_image: np.ndarray
    grad_depth: np.ndarray
    t: float
    skipped: bool = False


def sds_gradient(image: np.ndarray, depth: np.ndarray, denoiser: Denoiser, t_range=(0.02, 0.5), weight=1.0,
                 lambda_1: float = 1.0, lambda_2: float = 0.5, rng: Optional[np.random.Generator] = None) -> SDSResult:
    """Score-distillation gradients for a rendered image and depth map.

    Draws ``t ~ U(t_range)`` and independent noises for image and depth,
    noises each input as ``sqrt(ab) x + sqrt(1 - ab) eps`` with the
    denoiser's schedule, and returns ``lambda * w_t * (eps_hat - eps)`` as the
    gradient on each rendered input. On denoiser failure both gradients are
    zero and ``skipped`` is set.
    """
    lo, hi = t_range
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"t_range must lie inside (0, 1), got {t_range}")
    rng = rng if rng is not None else np.random.default_rng()
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    t = float(rng.uniform(lo, hi))
    seed_i, seed_d = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    w_t = float(weight(t)) if callable(weight) else float(weight)

    grad_image = np.zeros_like(image)
    grad_depth = np.zeros_like(depth)
    try:
        ab = denoiser.alpha_bar(t)
        if lambda_1 != 0:
            eps = noise_from_seed(seed_i, image.shape)
            x_t = math.sqrt(ab) * image + math.sqrt(1.0 - ab) * eps
            grad_image = lambda_1 * w_t * (denoiser.predict("image", x_t, t, seed_i) - eps)
        if lambda_2 != 0:
            eps = noise_from_seed(seed_d, depth.shape)
            x_t = math.sqrt(ab) * depth + math.sqrt(1.0 - ab) * eps
            grad_depth = lambda_2 * w_t * (denoiser.predict("depth", x_t, t, seed_d) - eps)
    except (DenoiserError, OSError) as exc:
        logger.warning("SDS step skipped: %s", exc)
        return SDSResult(np.zeros_like(image), np.zeros_like(depth), t, skipped=True)
    return SDSResult(grad_image, grad_depth, t)
