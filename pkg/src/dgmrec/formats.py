"""On-disk dataset layout: interactions TSV, MFT1 feature tables, missing-plan TSV.

A dataset directory holds::

    spec.txt            synthetic spec (key = value)
    interactions.tsv    user<TAB>item<TAB>split
    features_<m>.mft    observed table per modality
    truth_<m>.mft       ground-truth table per modality
    missing_plan.tsv    item<TAB>modality per missing entry
    new_items.txt       one flagged item id per line
    latents.npz         planted latents
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .config import dump_config, load_config
from .datagen import (
    SPLITS, DataError, DatasetBundle, InteractionDataset, Latents, MissingPlan, ModalityTable,
    SyntheticSpec,
)

MFT_MAGIC = b"MFT1"


def write_interactions(path: str | Path, ds: InteractionDataset) -> None:
    with open(path, "w") as f:
        for name in SPLITS:
            for u, i in ds.split(name):
                f.write(f"{u}\t{i}\t{name}\n")


def read_interactions(path: str | Path, num_users: int, num_items: int,
                      new_item_flags: np.ndarray | None = None) -> InteractionDataset:
    parts: dict[str, list[tuple[int, int]]] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split("\t")
        if len(fields) != 3 or fields[2] not in parts:
            raise DataError(f"{path}:{lineno}: malformed interaction line {line!r}")
        u, i = int(fields[0]), int(fields[1])
        if not (0 <= u < num_users and 0 <= i < num_items):
            raise DataError(f"{path}:{lineno}: id out of range")
        parts[fields[2]].append((u, i))
    return InteractionDataset(num_users, num_items, *(np.array(parts[s], dtype=np.int64) for s in SPLITS),
                              new_item_flags)


def write_features(path: str | Path, table: ModalityTable) -> None:
    with open(path, "wb") as f:
        f.write(MFT_MAGIC)
        f.write(struct.pack("<II", table.num_items, table.dim))
        f.write(np.ascontiguousarray(table.features, dtype="<f4").tobytes())
        f.write(table.available.astype(np.uint8).tobytes())


def read_features(path: str | Path, modality_id: int) -> ModalityTable:
    buf = Path(path).read_bytes()
    if buf[:4] != MFT_MAGIC:
        raise DataError(f"{path}: bad magic")
    n, d = struct.unpack_from("<II", buf, 4)
    body = 12 + 4 * n * d
    if len(buf) != body + n:
        raise DataError(f"{path}: truncated or oversized feature file")
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=12).reshape(n, d)
    avail = np.frombuffer(buf, dtype=np.uint8, count=n, offset=body)
    if avail.max(initial=0) > 1:
        raise DataError(f"{path}: availability bytes must be 0 or 1")
    return ModalityTable(modality_id, feats.astype(np.float32), avail.astype(bool))


def write_plan(path: str | Path, plan: MissingPlan) -> None:
    with open(path, "w") as f:
        for item, m in plan.entries():
            f.write(f"{item}\t{m}\n")


def read_plan(path: str | Path, num_items: int, num_modalities: int, mode: str,
              ratio: float | None = None) -> MissingPlan:
    missing = np.zeros((num_items, num_modalities), dtype=bool)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        try:
            item, m = (int(x) for x in line.split("\t"))
            missing[item, m] = True
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: malformed plan line {line!r}") from None
    return MissingPlan(mode, missing, ratio)


def dataset_files(num_modalities: int) -> list[str]:
    return (["spec.txt", "interactions.tsv"]
            + [f"features_{m}.mft" for m in range(num_modalities)]
            + [f"truth_{m}.mft" for m in range(num_modalities)]
            + ["missing_plan.tsv", "new_items.txt", "latents.npz"])


def save_bundle(directory: str | Path, bundle: DatasetBundle) -> list[Path]:
    if bundle.spec is None or bundle.truth is None or bundle.latents is None:
        raise DataError("only complete synthetic bundles can be saved")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.txt").write_text(dump_config(bundle.spec))
    write_interactions(out / "interactions.tsv", bundle.dataset)
    for m, (obs, truth) in enumerate(zip(bundle.tables, bundle.truth)):
        write_features(out / f"features_{m}.mft", obs)
        write_features(out / f"truth_{m}.mft", truth)
    write_plan(out / "missing_plan.tsv", bundle.plan)
    (out / "new_items.txt").write_text("".join(f"{i}\n" for i in np.flatnonzero(bundle.dataset.new_item_flags)))
    lat = bundle.latents
    buf = io.BytesIO()
    # plain np.savez embeds zip timestamps; write members ourselves for byte-stable output
    _write_npz(buf, {"shared": lat.shared, "users": lat.users,
                     **{f"specific_{m}": s for m, s in enumerate(lat.specific)}})
    (out / "latents.npz").write_bytes(buf.getvalue())
    return [out / name for name in dataset_files(len(bundle.tables))]


def _write_npz(fileobj, arrays: dict[str, np.ndarray]) -> None:
    import zipfile

    with zipfile.ZipFile(fileobj, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, member.getvalue())


def load_bundle(directory: str | Path) -> DatasetBundle:
    src = Path(directory)
    if not (src / "spec.txt").exists():
        raise DataError(f"{src}: no spec.txt; not a dataset directory")
    spec = load_config(SyntheticSpec, src / "spec.txt")
    M = spec.num_modalities
    flags = np.zeros(spec.num_items, dtype=bool)
    new_ids = [int(x) for x in (src / "new_items.txt").read_text().split()]
    flags[new_ids] = True
    ds = read_interactions(src / "interactions.tsv", spec.num_users, spec.num_items, flags)
    tables = [read_features(src / f"features_{m}.mft", m) for m in range(M)]
    truth = [read_features(src / f"truth_{m}.mft", m) for m in range(M)]
    mode = "levels" if spec.missing_mode == "levels" else "ratio"
    ratio = None if mode == "levels" else spec.missing_ratio
    plan = read_plan(src / "missing_plan.tsv", spec.num_items, M, mode, ratio)
    for m, t in enumerate(tables):
        if t.num_items != spec.num_items or t.dim != spec.modality_dims[m]:
            raise DataError(f"features_{m}.mft does not match the shape in spec.txt")
        if not np.array_equal(t.available, ~plan.missing[:, m]):
            raise DataError(f"features_{m}.mft availability disagrees with missing_plan.tsv")
    with np.load(src / "latents.npz") as z:
        latents = Latents(z["shared"], [z[f"specific_{m}"] for m in range(M)], z["users"])
    return DatasetBundle(ds, tables, plan, truth, latents, spec)
