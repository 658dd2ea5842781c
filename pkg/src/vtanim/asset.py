"""Animated model asset and its ``asset-v1`` container.

On disk an asset is two files: a JSON manifest at the chosen path and a
little-endian binary blob next to it (same name plus ``.bin``). The manifest
holds structure, names and parameters, and lists every array in the blob
with its dtype, shape, byte offset, byte length and SHA-256. Arrays are packed
back to back in manifest order, with no padding.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vtanim import __version__
from vtanim.ema import Articulator
from vtanim.ik import AnimationClip, IkTarget
from vtanim.mesh import TriMesh
from vtanim.rig import Armature, SkinWeights, armature_from_dict, armature_to_dict
from vtanim.transforms import RigidTransform

ASSET_FORMAT = "asset-v1"


class AssetError(ValueError):
    pass


class IntegrityError(AssetError):
    pass


class UnsupportedVersionError(AssetError):
    pass


@dataclass(frozen=True)
class CoilMarker:
    """A coil as rendered in the asset: bind position and the mesh it sits on."""

    coil_id: str
    articulator: Articulator
    chain_index: int | None
    bind_position: np.ndarray
    mesh: str | None

    def __post_init__(self) -> None:
        object.__setattr__(self, "articulator", Articulator(self.articulator))
        p = np.array(self.bind_position, dtype=float).reshape(3)
        p.setflags(write=False)
        object.__setattr__(self, "bind_position", p)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoilMarker):
            return NotImplemented
        return (
            (self.coil_id, self.articulator, self.chain_index, self.mesh)
            == (other.coil_id, other.articulator, other.chain_index, other.mesh)
            and np.array_equal(self.bind_position, other.bind_position)
        )


@dataclass(frozen=True, eq=False)
class AnimatedModelAsset:
    """Bind meshes, rig, skin weights, solved clip and the targets it tracked.

    ``weights`` covers the deforming meshes only; meshes without weights are
    static. ``target_positions`` has shape (frames, targets, 3) and lines up
    with ``topology``.
    """

    meshes: Mapping[str, TriMesh]
    armature: Armature
    weights: Mapping[str, SkinWeights]
    clip: AnimationClip
    topology: tuple[IkTarget, ...]
    target_positions: np.ndarray
    coils: tuple[CoilMarker, ...]
    registration: RigidTransform = RigidTransform()
    parameters: Mapping = field(default_factory=dict)
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "meshes", dict(sorted(self.meshes.items())))
        object.__setattr__(self, "weights", dict(sorted(self.weights.items())))
        object.__setattr__(self, "topology", tuple(self.topology))
        object.__setattr__(self, "coils", tuple(self.coils))
        tp = np.array(self.target_positions, dtype=float)
        tp.setflags(write=False)
        object.__setattr__(self, "target_positions", tp)
        bones = set(self.armature.bone_ids)
        for name, w in self.weights.items():
            if name not in self.meshes:
                raise AssetError(f"weights for unknown mesh {name!r}")
            if w.n_vertices != self.meshes[name].n_vertices:
                raise AssetError(f"weights for {name!r} do not cover its vertices")
            if w.bone_ids != self.armature.bone_ids:
                raise AssetError(f"weights for {name!r} reference a different armature")
        if not self.clip.matches(self.armature):
            raise AssetError("clip does not match the armature")
        for t in self.topology:
            if t.bone_id not in bones:
                raise AssetError(f"target {t.coil_id!r} references unknown bone {t.bone_id!r}")
        if tp.shape != (self.clip.n_frames, len(self.topology), 3):
            raise AssetError(f"target positions have shape {tp.shape}")
        for c in self.coils:
            if c.mesh is not None and c.mesh not in self.meshes:
                raise AssetError(f"coil {c.coil_id!r} maps to unknown mesh {c.mesh!r}")

    def coil(self, coil_id: str) -> CoilMarker:
        for c in self.coils:
            if c.coil_id == coil_id:
                return c
        raise AssetError(f"unknown coil {coil_id!r}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnimatedModelAsset):
            return NotImplemented
        return (
            self.meshes == other.meshes
            and self.armature == other.armature
            and self.weights == other.weights
            and self.clip == other.clip
            and [t.binding for t in self.topology] == [t.binding for t in other.topology]
            and np.array_equal(self.target_positions, other.target_positions)
            and self.coils == other.coils
            and self.registration == other.registration
            and dict(self.parameters) == dict(other.parameters)
            and dict(self.provenance) == dict(other.provenance)
        )


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def buffer_path(manifest_path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.name + ".bin")


class _Packer:
    def __init__(self) -> None:
        self.entries: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, array: np.ndarray, dtype: str) -> str:
        a = np.ascontiguousarray(np.asarray(array).astype(dtype, copy=False))
        raw = a.tobytes()
        self.entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(a.shape),
                "offset": self.offset,
                "length": len(raw),
                "sha256": sha256_bytes(raw),
            }
        )
        self.chunks.append(raw)
        self.offset += len(raw)
        return name


def _encode(asset: AnimatedModelAsset, blob_name: str) -> tuple[dict, bytes]:
    pk = _Packer()
    meshes = {}
    for name, m in asset.meshes.items():
        entry = {
            "vertices": pk.add(f"mesh.{name}.vertices", m.vertices, "<f8"),
            "triangles": pk.add(f"mesh.{name}.triangles", m.triangles, "<i4"),
            "weights": None,
        }
        w = asset.weights.get(name)
        if w is not None:
            entry["weights"] = {
                "indices": pk.add(f"weights.{name}.indices", w.indices, "<i4"),
                "weights": pk.add(f"weights.{name}.weights", w.weights, "<f8"),
            }
        meshes[name] = entry
    clip = asset.clip
    clip_doc = {
        "frame_rate_hz": clip.frame_rate_hz,
        "frames": clip.n_frames,
        "rotations": pk.add("clip.rotations", clip.rotations, "<f8"),
        "root_translations": pk.add("clip.root_translations", clip.root_translations, "<f8"),
        "residuals_mm": pk.add("clip.residuals_mm", clip.residuals_mm, "<f8"),
        "iterations": pk.add("clip.iterations", clip.iterations, "<i4"),
        "converged": pk.add("clip.converged", clip.converged, "|u1"),
        "held": pk.add("clip.held", clip.held, "|u1"),
    }
    targets_doc = {
        "topology": [
            {
                "coil": t.coil_id,
                "bone": t.bone_id,
                "offset": t.offset.tolist(),
                "position_weight": t.position_weight,
                "orientation_weight": t.orientation_weight,
            }
            for t in asset.topology
        ],
        "positions": pk.add("targets.positions", asset.target_positions, "<f8"),
    }
    coils_doc = [
        {
            "id": c.coil_id,
            "articulator": c.articulator.value,
            "chain_index": c.chain_index,
            "mesh": c.mesh,
            "bind_position": c.bind_position.tolist(),
        }
        for c in asset.coils
    ]
    blob = b"".join(pk.chunks)
    manifest = {
        "format": ASSET_FORMAT,
        "tool_version": __version__,
        "buffer": {"file": blob_name, "length": len(blob), "sha256": sha256_bytes(blob)},
        "buffers": pk.entries,
        "meshes": meshes,
        "armature": armature_to_dict(asset.armature),
        "clip": clip_doc,
        "targets": targets_doc,
        "coils": coils_doc,
        "registration": asset.registration.to_dict(),
        "parameters": asset.parameters,
        "provenance": asset.provenance,
    }
    return manifest, blob


def dumps_manifest(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def encode_asset(asset: AnimatedModelAsset, path) -> tuple[bytes, bytes]:
    """Manifest and buffer bytes exactly as :func:`write_asset` stores them."""
    path = Path(path)
    manifest, blob = _encode(asset, buffer_path(path).name)
    return dumps_manifest(manifest), blob


def write_asset(asset: AnimatedModelAsset, path) -> Path:
    """Write manifest and buffer; the buffer lands first, the manifest last."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc, blob = encode_asset(asset, path)
    _atomic_write(buffer_path(path), blob)
    _atomic_write(path, doc)
    return path


def remove_asset(path) -> None:
    for p in (Path(path), buffer_path(path)):
        if p.exists():
            p.unlink()


def _decode_buffers(manifest: dict, blob: bytes) -> dict[str, np.ndarray]:
    declared = manifest["buffer"]
    if len(blob) != declared["length"]:
        raise IntegrityError(f"buffer file has {len(blob)} bytes, manifest declares {declared['length']}")
    out = {}
    cursor = 0
    for e in manifest["buffers"]:
        if e["offset"] != cursor:
            raise IntegrityError(f"buffer {e['name']!r} does not start where the previous one ended")
        raw = blob[e["offset"] : e["offset"] + e["length"]]
        if sha256_bytes(raw) != e["sha256"]:
            raise IntegrityError(f"hash mismatch in buffer {e['name']!r}")
        a = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = a
        cursor += e["length"]
    if cursor != len(blob):
        raise IntegrityError("trailing bytes after the last buffer")
    if sha256_bytes(blob) != declared["sha256"]:
        raise IntegrityError("hash mismatch in buffer file")
    return out


def read_asset(path) -> AnimatedModelAsset:
    path = Path(path)
    try:
        manifest = json.loads(path.read_bytes())
    except json.JSONDecodeError as exc:
        raise AssetError(f"{path}: manifest is not valid JSON ({exc})") from None
    fmt = manifest.get("format") if isinstance(manifest, dict) else None
    if fmt != ASSET_FORMAT:
        raise UnsupportedVersionError(f"{path}: unsupported asset format {fmt!r} (expected {ASSET_FORMAT!r})")
    blob = (path.parent / manifest["buffer"]["file"]).read_bytes()
    buf = _decode_buffers(manifest, blob)
    prov = manifest.get("provenance") or {}
    if not prov.get("config_sha256") or not isinstance(prov.get("inputs"), dict):
        raise IntegrityError(f"{path}: provenance hashes missing")
    try:
        return _assemble(manifest, buf)
    except KeyError as exc:
        raise AssetError(f"{path}: manifest lacks {exc}") from None


def _assemble(manifest: dict, buf: dict[str, np.ndarray]) -> AnimatedModelAsset:
    armature = armature_from_dict(manifest["armature"])
    meshes, weights = {}, {}
    for name, m in manifest["meshes"].items():
        meshes[name] = TriMesh(buf[m["vertices"]], buf[m["triangles"]].astype(np.int64))
        if m["weights"] is not None:
            weights[name] = SkinWeights(
                armature.bone_ids, buf[m["weights"]["indices"]], buf[m["weights"]["weights"]]
            )
    c = manifest["clip"]
    clip = AnimationClip(
        c["frame_rate_hz"],
        buf[c["rotations"]].copy(),
        buf[c["root_translations"]].copy(),
        buf[c["residuals_mm"]].copy(),
        buf[c["iterations"]].astype(np.int32),
        buf[c["converged"]].astype(bool),
        buf[c["held"]].astype(bool),
    )
    positions = buf[manifest["targets"]["positions"]]
    topology = tuple(
        IkTarget(
            t["coil"],
            t["bone"],
            np.zeros(3),
            t["offset"],
            position_weight=t["position_weight"],
            orientation_weight=t["orientation_weight"],
        )
        for t in manifest["targets"]["topology"]
    )
    coils = tuple(
        CoilMarker(c["id"], c["articulator"], c["chain_index"], c["bind_position"], c["mesh"])
        for c in manifest["coils"]
    )
    return AnimatedModelAsset(
        meshes=meshes,
        armature=armature,
        weights=weights,
        clip=clip,
        topology=topology,
        target_positions=positions,
        coils=coils,
        registration=RigidTransform.from_dict(manifest["registration"]),
        parameters=manifest["parameters"],
        provenance=manifest["provenance"],
    )
