"""Attention capture from a real Stable Diffusion pipeline.

Needs torch + diffusers + transformers and local model weights; imports
are deferred so the rest of the package works without them. The capture
strategy follows the two-prompt scheme: the image is denoised under the
full prompt, and after every step the UNet is re-run under the class-only
prompt with capturing processors enabled, which yields cross-attention
restricted to the class tokens without touching the generation
trajectory. Self-attention is captured on the same pass.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .backends import ExportJob, ExportResult
from .container import ExportError, Manifest, Record, write_container
from .spans import class_token_spans


class _CaptureProcessor:
    """Drop-in attention processor that records softmax probabilities.

    Only captures when ``sink.active`` is truthy; the generation pass runs
    with capture disabled so its cost stays normal.
    """

    def __init__(self, name: str, sink: "DiffusersBackend"):
        self.name = name
        self.sink = sink

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, temb=None, **kwargs):
        import torch

        residual = hidden_states
        is_cross = encoder_hidden_states is not None
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        batch_size, q_len, _ = hidden_states.shape
        if attention_mask is not None:
            attention_mask = attn.prepare_attention_mask(
                attention_mask, q_len, batch_size
            )
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(
                hidden_states.transpose(1, 2)
            ).transpose(1, 2)
        context = encoder_hidden_states if is_cross else hidden_states
        if is_cross and attn.norm_cross:
            context = attn.norm_encoder_hidden_states(context)

        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        key = attn.head_to_batch_dim(attn.to_k(context))
        value = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(query, key, attention_mask)

        if self.sink.active:
            heads = attn.heads
            maps = probs.reshape(batch_size, heads, q_len, -1).mean(dim=1)
            self.sink.collect(self.name, is_cross, maps[-1])  # cond branch

        hidden_states = attn.batch_to_head_dim(torch.bmm(probs, value))
        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)
        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


class DiffusersBackend:
    """Capture attention from a locally available diffusion checkpoint."""

    def __init__(
        self,
        model_id: str = "stabilityai/stable-diffusion-2-1-base",
        device: str = "cpu",
        guidance_scale: float = 7.5,
        dtype=None,
    ):
        try:
            import torch
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ExportError(
                "the diffusers backend needs torch, diffusers and "
                "transformers installed (pip install 'sd-attn-dump[sd]')"
            ) from exc
        self.torch = torch
        self.pipe = StableDiffusionPipeline.from_pretrained(
            model_id, torch_dtype=dtype or torch.float32
        ).to(device)
        self.device = device
        self.guidance_scale = guidance_scale
        self.active = False
        self._step_maps: dict[tuple[str, bool], np.ndarray] = {}
        procs = {
            name: _CaptureProcessor(name, self)
            for name in self.pipe.unet.attn_processors
        }
        self.pipe.unet.set_attn_processor(procs)

    def collect(self, name: str, is_cross: bool, probs) -> None:
        self._step_maps[(name, is_cross)] = (
            probs.detach().to("cpu", self.torch.float32).numpy()
        )

    def _token_counts(self, name: str) -> int:
        return len(self.pipe.tokenizer(name, add_special_tokens=False).input_ids)

    def _encode(self, text: str):
        tok = self.pipe.tokenizer(
            text,
            padding="max_length",
            max_length=self.pipe.tokenizer.model_max_length,
            truncation=True,
            return_tensors="pt",
        )
        with self.torch.no_grad():
            return self.pipe.text_encoder(tok.input_ids.to(self.device))[0]

    def _capture_layers(self, job: ExportJob) -> dict[str, int]:
        """Stable layer index per self/cross attention module name."""
        names = sorted(
            {name.rsplit(".attn", 1)[0] for name in self.pipe.unet.attn_processors}
        )
        return {name: i for i, name in enumerate(names)}

    def run(self, job: ExportJob) -> ExportResult:
        torch = self.torch
        pipe = self.pipe
        names = [n for _, n in job.classes]
        spans, _ = class_token_spans(names, self._token_counts, prefix_tokens=1)
        token_count = pipe.tokenizer.model_max_length
        if spans and spans[-1][1] >= token_count:
            raise ExportError("class prompt longer than the token axis")
        layer_of = self._capture_layers(job)

        cond = self._encode(job.prompt)
        uncond = self._encode("")
        class_embeds = self._encode(job.class_prompt)
        both = torch.cat([uncond, cond])

        pipe.scheduler.set_timesteps(job.steps, device=self.device)
        generator = torch.Generator(device=self.device).manual_seed(job.seed)
        latents = torch.randn(
            (1, pipe.unet.config.in_channels,
             pipe.unet.config.sample_size, pipe.unet.config.sample_size),
            generator=generator,
            device=self.device,
        ) * pipe.scheduler.init_noise_sigma

        wanted = {int(s) for s in job.scales}

        def denoise() -> Iterator[Record]:
            nonlocal latents
            for t_idx, t in enumerate(pipe.scheduler.timesteps):
                model_in = pipe.scheduler.scale_model_input(
                    torch.cat([latents] * 2), t
                )
                with torch.no_grad():
                    noise = pipe.unet(model_in, t, encoder_hidden_states=both).sample
                un, co = noise.chunk(2)
                guided = un + self.guidance_scale * (co - un)
                latents = pipe.scheduler.step(guided, t, latents).prev_sample

                # capture pass under the class-only prompt
                self.active = True
                self._step_maps.clear()
                cap_in = pipe.scheduler.scale_model_input(latents, t)
                with torch.no_grad():
                    pipe.unet(cap_in, t, encoder_hidden_states=class_embeds)
                self.active = False

                for (name, is_cross), maps in sorted(self._step_maps.items()):
                    q_len = maps.shape[0]
                    g = int(math.isqrt(q_len))
                    if g * g != q_len or g not in wanted:
                        continue
                    data = np.clip(maps, 0.0, 1.0)
                    data /= data.sum(axis=1, keepdims=True)
                    yield Record(
                        kind="cross" if is_cross else "self",
                        layer=layer_of[name.rsplit(".attn", 1)[0]],
                        timestep=t_idx,
                        grid=(g, g),
                        data=data.astype(np.float32),
                    )

        manifest = Manifest(
            image_id=job.image_id,
            prompt=job.prompt,
            class_prompt=job.class_prompt,
            classes=[
                {"id": cid, "name": name, "token_span": list(span)}
                for (cid, name), span in zip(job.classes, spans)
            ],
            num_layers=len(layer_of),
            num_timesteps=job.steps,
            image_size=(
                pipe.unet.config.sample_size * pipe.vae_scale_factor,
                pipe.unet.config.sample_size * pipe.vae_scale_factor,
            ),
            seed=job.seed,
            token_count=token_count,
        )
        out = Path(job.out_dir)
        write_container(manifest, denoise(), out)
        captured = {(d["kind"], d["grid"][0]) for d in manifest.records}
        missing = [
            (kind, s)
            for s in wanted
            for kind in ("self", "cross")
            if (kind, s) not in captured
        ]
        if missing:
            raise ExportError(
                f"capture hooks produced no records for {missing}; the model "
                f"has no attention layers at those resolutions"
            )

        with torch.no_grad():
            decoded = pipe.vae.decode(
                latents / pipe.vae.config.scaling_factor
            ).sample
        array = (
            ((decoded / 2 + 0.5).clamp(0, 1)[0].permute(1, 2, 0) * 255)
            .to(torch.uint8)
            .cpu()
            .numpy()
        )
        image_path = out / "image.png"
        Image.fromarray(array, mode="RGB").save(image_path, format="PNG")
        return ExportResult(
            container_dir=out, image_path=image_path, manifest=manifest
        )
