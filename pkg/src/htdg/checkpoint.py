"""Model-stack serialization: a manifest plus raw float32 blobs.

Every blob starts with a 16-byte header (magic "HTDG", little-endian
u32 format version, u64 element count) followed by the elements as
little-endian IEEE-754 float32. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .nets import Discriminator, Generator
from .trainer import ModelStack

MAGIC = b"HTDG"
BLOB_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<4sIQ")


def _module_tensors(module: torch.nn.Module) -> list[tuple[str, torch.Tensor]]:
    """Float tensors of a module's state in a stable order.

    Integer bookkeeping buffers (batch counters) are excluded; they do
    not affect eval-time behavior.
    """
    return [(k, v) for k, v in module.state_dict().items() if v.is_floating_point()]


def write_blob(path: Path, tensors: list[torch.Tensor]) -> int:
    """Concatenate tensors as float32 and write one headered blob."""
    if tensors:
        flat = torch.cat([t.detach().reshape(-1).to(torch.float32) for t in tensors])
        payload = flat.numpy().astype("<f4", copy=False).tobytes()
        count = flat.numel()
    else:
        payload = b""
        count = 0
    path.write_bytes(_HEADER.pack(MAGIC, BLOB_VERSION, count) + payload)
    return count


def read_blob(path: Path, expected_count: int | None = None) -> np.ndarray:
    """Read one blob back as a float32 array, validating the header."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise CheckpointError(f"blob {path.name} is shorter than its 16-byte header")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"blob {path.name} has bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise CheckpointError(
            f"blob {path.name} has format version {version}, expected {BLOB_VERSION}"
        )
    payload = data[_HEADER.size :]
    if len(payload) != 4 * count:
        raise CheckpointError(
            f"blob {path.name} is truncated: header promises {count} elements, "
            f"payload holds {len(payload) // 4}"
        )
    if expected_count is not None and count != expected_count:
        raise CheckpointError(
            f"blob {path.name} holds {count} elements, manifest expects {expected_count}"
        )
    return np.frombuffer(payload, dtype="<f4")


def _fill_module(module: torch.nn.Module, flat: np.ndarray, blob_name: str) -> None:
    offset = 0
    with torch.no_grad():
        for key, tensor in _module_tensors(module):
            n = tensor.numel()
            if offset + n > flat.size:
                raise CheckpointError(
                    f"blob {blob_name} too small while loading {key} "
                    f"(needs {offset + n} elements, has {flat.size})"
                )
            chunk = torch.from_numpy(flat[offset : offset + n].copy())
            tensor.copy_(chunk.view(tensor.shape))
            offset += n
    if offset != flat.size:
        raise CheckpointError(
            f"blob {blob_name} holds {flat.size} elements, module consumed {offset}"
        )


def save_stack(stack: ModelStack, directory: str | Path) -> Path:
    """Write manifest plus per-scale network blobs and the fixed noise."""
    stack.require_trained()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, dict] = {}
    for n in range(stack.N + 1):
        dname = f"d{n}"
        count = write_blob(
            directory / f"{dname}.bin",
            [t for _, t in _module_tensors(stack.discriminators[n])],
        )
        blobs[dname] = {"file": f"{dname}.bin", "count": count}
        gen = stack.generators[n]
        if gen is not None:
            gname = f"g{n}"
            count = write_blob(directory / f"{gname}.bin", [t for _, t in _module_tensors(gen)])
            blobs[gname] = {"file": f"{gname}.bin", "count": count}
    if stack.z_star is not None:
        count = write_blob(directory / "zstar.bin", [stack.z_star])
        blobs["zstar"] = {"file": "zstar.bin", "count": count}
    manifest = {
        "format_version": MANIFEST_VERSION,
        "k": stack.k,
        "M": stack.M,
        "r": stack.r,
        "N": stack.N,
        "channels": stack.channels,
        "variant": stack.variant,
        "sizes": [list(s) for s in stack.sizes],
        "sigmas": stack.sigmas,
        "image_indices": stack.image_indices,
        "config": stack.config,
        "z_star_shape": list(stack.z_star.shape) if stack.z_star is not None else None,
        "blobs": blobs,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_stack(directory: str | Path) -> ModelStack:
    """Rebuild a stack from a checkpoint directory; nets land in eval mode."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest in {directory}: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise CheckpointError(
            f"manifest format version {manifest.get('format_version')} unsupported "
            f"(expected {MANIFEST_VERSION})"
        )
    config = manifest["config"]
    width = int(config.get("width", 32))
    variant = manifest["variant"]
    stack = ModelStack(
        k=int(manifest["k"]),
        M=int(manifest["M"]),
        r=float(manifest["r"]),
        N=int(manifest["N"]),
        channels=int(manifest["channels"]),
        sizes=[tuple(s) for s in manifest["sizes"]],
        variant=variant,
        config=config,
        image_indices=list(manifest["image_indices"]),
    )
    blobs = manifest["blobs"]
    if len(manifest["sigmas"]) != stack.N + 1:
        raise CheckpointError(
            f"manifest sigma list has {len(manifest['sigmas'])} entries, expected {stack.N + 1}"
        )
    out_channels = stack.M + (1 if variant != "a" else 0)
    for n in range(stack.N + 1):
        dname = f"d{n}"
        if dname not in blobs:
            raise CheckpointError(f"manifest lists no blob for {dname}")
        disc = Discriminator(stack.channels, out_channels, width=width)
        flat = read_blob(directory / blobs[dname]["file"], int(blobs[dname]["count"]))
        _fill_module(disc, flat, dname)
        disc.eval().requires_grad_(False)
        gen = None
        if variant != "a":
            gname = f"g{n}"
            if gname not in blobs:
                raise CheckpointError(f"manifest lists no blob for {gname}")
            gen = Generator(stack.channels, conditioned=stack.conditioned, width=width)
            flat = read_blob(directory / blobs[gname]["file"], int(blobs[gname]["count"]))
            _fill_module(gen, flat, gname)
            gen.eval().requires_grad_(False)
        sigma = float(manifest["sigmas"][n])
        stack.generators.append(gen)
        stack.discriminators.append(disc)
        stack.sigmas.append(sigma)
    if manifest["z_star_shape"] is not None:
        flat = read_blob(directory / blobs["zstar"]["file"], int(blobs["zstar"]["count"]))
        stack.z_star = torch.from_numpy(flat.copy()).view(*manifest["z_star_shape"])
    return stack
