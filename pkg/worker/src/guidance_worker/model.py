"""Score-distillation core: encoder, noising, CFG noise prediction, and the
pullback of the SDS residual to image space.

The mock adapter keeps the whole pipeline exercisable without model
weights: its encoder is the identity and its noise prediction is the true
noise plus a constant bias, so expected outputs have closed forms. A real
adapter wraps a pretrained multi-view diffusion model behind the same three
methods.
"""
from __future__ import annotations

import importlib.util
import math
from dataclasses import dataclass

import numpy as np


class ModelError(RuntimeError):
    pass


class DiffusionAdapter:
    """Minimal surface a guidance model must provide.

    encode(images)            -> latents, one array per view
    predict_noise(...)        -> epsilon-hat per view, CFG already applied
    encoder_vjp(view, cotangent) -> dL/dimage for one view
    """

    def encode(self, images: list) -> list:
        raise NotImplementedError

    def predict_noise(self, noisy_latents: list, t: float, prompt: str,
                      negative_prompt: str, cameras: list,
                      guidance_scale: float) -> list:
        raise NotImplementedError

    def sds_residual(self, noisy_latents: list, t: float, noise: list,
                     prompt: str, negative_prompt: str, cameras: list,
                     guidance_scale: float) -> list:
        """eps_hat - eps per view; adapters with closed forms may override."""
        eps_hat = self.predict_noise(noisy_latents, t, prompt, negative_prompt,
                                     cameras, guidance_scale)
        return [eh - eps for eh, eps in zip(eps_hat, noise)]

    def encoder_vjp(self, view_index: int, image: np.ndarray,
                    cotangent: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MockAdapter(DiffusionAdapter):
    """Identity encoder; epsilon-hat = epsilon + bias.

    With bias 0 the SDS residual cancels exactly (zero loss, zero
    gradients); with bias k the returned gradient is the constant k at
    every pixel.
    """

    def __init__(self, bias: float = 0.0):
        self.bias = bias
        self._last_noise: list | None = None

    def encode(self, images):
        return [img.astype(np.float64) for img in images]

    def predict_noise(self, noisy_latents, t, prompt, negative_prompt,
                      cameras, guidance_scale):
        if self._last_noise is None:
            raise ModelError("predict_noise called before noising")
        cond = [eps + self.bias for eps in self._last_noise]
        uncond = cond  # the mock is prompt-independent
        # CFG as c + w(c - u): cancels exactly when cond == uncond
        return [c + guidance_scale * (c - u) for c, u in zip(cond, uncond)]

    def sds_residual(self, noisy_latents, t, noise, prompt, negative_prompt,
                     cameras, guidance_scale):
        # eps_hat == eps + bias by construction, and the CFG blend of two
        # identical predictions cancels, so the residual is the bias exactly
        return [np.full_like(eps, self.bias) for eps in noise]

    def encoder_vjp(self, view_index, image, cotangent):
        return cotangent.astype(np.float64)


def _alpha_bar(t: float) -> float:
    """Continuous cosine noise schedule, alpha_bar(0) = 1, alpha_bar(1) -> 0."""
    return math.cos(0.5 * math.pi * min(max(t, 0.0), 1.0)) ** 2


@dataclass
class SDSSettings:
    weight_mode: str = "constant"   # w(t); "constant" means w(t) = 1

    def weight(self, t: float, alpha_bar: float) -> float:
        if self.weight_mode == "constant":
            return 1.0
        if self.weight_mode == "one_minus_alpha_bar":
            return 1.0 - alpha_bar
        raise ModelError(f"unknown weight mode {self.weight_mode!r}")


def sds_image_gradients(adapter: DiffusionAdapter, images: list, cameras: list,
                        prompt: str, negative_prompt: str, guidance_scale: float,
                        t_min: float, t_max: float, seed: int,
                        settings: SDSSettings | None = None):
    """One SDS evaluation: returns (surrogate loss, per-view dL/dimage).

    Draws t ~ U[t_min, t_max] and per-latent Gaussian noise from `seed`,
    forms the classifier-free-guided residual w(t)(eps_hat - eps) and pulls
    it back through the encoder only.
    """
    settings = settings or SDSSettings()
    rng = np.random.default_rng(seed)
    t = float(rng.uniform(t_min, t_max))
    ab = _alpha_bar(t)

    latents = adapter.encode(images)
    noise = [rng.standard_normal(z.shape) for z in latents]
    noisy = [math.sqrt(ab) * z + math.sqrt(1.0 - ab) * eps
             for z, eps in zip(latents, noise)]
    if isinstance(adapter, MockAdapter):
        adapter._last_noise = noise
    residuals = adapter.sds_residual(noisy, t, noise, prompt, negative_prompt,
                                     cameras, guidance_scale)

    w = settings.weight(t, ab)
    if w != 1.0:
        residuals = [w * r for r in residuals]
    grads = [adapter.encoder_vjp(i, img, res)
             for i, (img, res) in enumerate(zip(images, residuals))]
    loss = 0.5 * float(np.mean([np.mean(r * r) for r in residuals]))
    return loss, grads


def load_adapter(model_path: str | None, mock: bool, mock_bias: float) -> DiffusionAdapter:
    """Mock adapter, or a real one from a Python module defining make_adapter()."""
    if mock:
        return MockAdapter(bias=mock_bias)
    if not model_path:
        raise ModelError("no model specified; pass --model PATH or --mock")
    spec = importlib.util.spec_from_file_location("guidance_worker_adapter", model_path)
    if spec is None or spec.loader is None:
        raise ModelError(f"cannot load adapter module from {model_path!r}")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "make_adapter"):
        raise ModelError(f"{model_path!r} does not define make_adapter()")
    adapter = module.make_adapter()
    if not isinstance(adapter, DiffusionAdapter):
        raise ModelError("make_adapter() must return a DiffusionAdapter")
    return adapter
