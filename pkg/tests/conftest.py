import numpy as np
import pytest

from attnseg.prompts import ClassEntry, ClassVocabulary
from attnseg.store import (
    AttentionRecord,
    Kind,
    ManifestClass,
    RunManifest,
    write_container,
)


@pytest.fixture
def vocab():
    return ClassVocabulary(
        [
            ClassEntry(1, "aeroplane", ("airplane", "plane")),
            ClassEntry(2, "bicycle", ("bike",)),
            ClassEntry(3, "boat"),
            ClassEntry(4, "bottle"),
            ClassEntry(5, "dog"),
            ClassEntry(6, "microwave"),
            ClassEntry(7, "person", ("man", "woman")),
            ClassEntry(8, "refrigerator"),
            ClassEntry(9, "sink"),
        ]
    )


def stochastic(rng, rows, cols, dtype=np.float32):
    """Random row-stochastic matrix."""
    m = rng.random((rows, cols)) + 1e-3
    m /= m.sum(axis=1, keepdims=True)
    return m.astype(dtype)


def make_manifest(
    grid=4,
    token_count=4,
    classes=None,
    num_layers=1,
    num_timesteps=1,
    image_id="img",
    image_size=(8, 8),
    seed=0,
):
    if classes is None:
        classes = [ManifestClass(1, "disc", (1, 2)), ManifestClass(2, "box", (2, 3))]
    return RunManifest(
        image_id=image_id,
        prompt="a scene; disc box",
        class_prompt="disc box",
        classes=classes,
        num_layers=num_layers,
        num_timesteps=num_timesteps,
        image_size=image_size,
        seed=seed,
        token_count=token_count,
    )


def make_records(rng, grid, token_count, num_layers, num_timesteps):
    recs = []
    n = grid * grid
    for layer in range(num_layers):
        for t in range(num_timesteps):
            recs.append(
                AttentionRecord(
                    kind=Kind.SELF,
                    layer=layer,
                    timestep=t,
                    grid=(grid, grid),
                    data=stochastic(rng, n, n),
                )
            )
            recs.append(
                AttentionRecord(
                    kind=Kind.CROSS,
                    layer=layer,
                    timestep=t,
                    grid=(grid, grid),
                    data=stochastic(rng, n, token_count),
                    token_count=token_count,
                )
            )
    return recs


def make_container(tmp_path, rng=None, grid=4, token_count=4, layers=2, timesteps=3):
    rng = rng or np.random.default_rng(0)
    manifest = make_manifest(
        grid=grid,
        token_count=token_count,
        num_layers=layers,
        num_timesteps=timesteps,
    )
    records = make_records(rng, grid, token_count, layers, timesteps)
    write_container(manifest, records, tmp_path)
    return tmp_path, records
