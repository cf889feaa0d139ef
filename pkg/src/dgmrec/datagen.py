"""Synthetic multi-modal corpora, missing-modality protocols and splits.

Items carry a shared latent ``z`` (visible in every modality) and one specific
latent per modality.  Raw modality rows are fixed random linear images of
``z ⊕ s_m`` plus noise, and users pick items with probability proportional to
``softmax(w_u · z_i)``.  The planted latents are returned so that
disentanglement can be scored against ground truth.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "valid", "test")
NN_NEIGHBORS = 10


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int
    num_items: int
    num_modalities: int
    z_dim: int
    s_dim: int
    modality_dims: tuple[int, ...]
    interactions_per_user: int
    noise: float
    seed: int
    # protocol applied by gen-data after the corpus is drawn
    missing_mode: str = "levels"
    missing_ratio: float = 0.0
    new_item_fraction: float = 0.0

    def __post_init__(self):
        for name in ("num_users", "num_items", "num_modalities", "z_dim", "interactions_per_user"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.s_dim < 0:
            raise DataError("s_dim must be >= 0")
        if self.noise < 0:
            raise DataError("noise must be >= 0")
        if len(self.modality_dims) != self.num_modalities or min(self.modality_dims) <= 0:
            raise DataError("modality_dims must list one positive dim per modality")
        if self.interactions_per_user > self.num_items:
            raise DataError("interactions_per_user exceeds num_items")
        if self.missing_mode not in ("levels", "ratio", "none"):
            raise DataError(f"unknown missing_mode {self.missing_mode!r}")
        if not 0.0 <= self.missing_ratio <= 1.0:
            raise DataError("missing_ratio must lie in [0, 1]")
        if not 0.0 <= self.new_item_fraction < 1.0:
            raise DataError("new_item_fraction must lie in [0, 1)")


@dataclass
class InteractionDataset:
    num_users: int
    num_items: int
    train: np.ndarray  # (n, 2) int64 user/item pairs
    valid: np.ndarray
    test: np.ndarray
    new_item_flags: np.ndarray = None  # bool per item

    def __post_init__(self):
        for name in SPLITS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2))
        if self.new_item_flags is None:
            self.new_item_flags = np.zeros(self.num_items, dtype=bool)

    def split(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def user_items(self, split: str = "train") -> list[np.ndarray]:
        pairs = self.split(split)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        bounds = np.searchsorted(pairs[:, 0], np.arange(self.num_users + 1))
        return [pairs[bounds[u]:bounds[u + 1], 1] for u in range(self.num_users)]

    def item_degree(self, split: str = "train") -> np.ndarray:
        return np.bincount(self.split(split)[:, 1], minlength=self.num_items)

    def user_degree(self, split: str = "train") -> np.ndarray:
        return np.bincount(self.split(split)[:, 0], minlength=self.num_users)


@dataclass
class ModalityTable:
    modality_id: int
    features: np.ndarray  # (num_items, dim) float32
    available: np.ndarray  # bool per item

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.available = np.asarray(self.available, dtype=bool)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_items(self) -> int:
        return self.features.shape[0]

    def copy(self) -> "ModalityTable":
        return ModalityTable(self.modality_id, self.features.copy(), self.available.copy())

    def available_mean(self) -> np.ndarray:
        if not self.available.any():
            raise DataError(f"modality {self.modality_id} has no available rows")
        return self.features[self.available].mean(axis=0, dtype=np.float64).astype(np.float32)


@dataclass
class MissingPlan:
    mode: str  # "levels" or "ratio"
    missing: np.ndarray  # (num_items, num_modalities) bool, True = missing
    ratio: float | None = None

    @property
    def num_items(self) -> int:
        return self.missing.shape[0]

    @property
    def num_modalities(self) -> int:
        return self.missing.shape[1]

    def missing_count(self) -> np.ndarray:
        return self.missing.sum(axis=1)

    def entries(self) -> list[tuple[int, int]]:
        items, mods = np.nonzero(self.missing)
        return list(zip(items.tolist(), mods.tolist()))


@dataclass
class Latents:
    shared: np.ndarray  # (items, z_dim)
    specific: list[np.ndarray]  # per modality (items, s_dim)
    users: np.ndarray  # (users, z_dim)


@dataclass
class DatasetBundle:
    """Everything a training run needs: interactions, observed tables, plan and hidden truth."""

    dataset: InteractionDataset
    tables: list[ModalityTable]
    plan: MissingPlan
    truth: list[ModalityTable] | None = None
    latents: Latents | None = None
    spec: SyntheticSpec | None = None
    extra: dict = field(default_factory=dict)

    @property
    def num_modalities(self) -> int:
        return len(self.tables)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def generate_corpus(spec: SyntheticSpec) -> tuple[InteractionDataset, list[ModalityTable], Latents]:
    rng = _rng(spec.seed, 0)
    n_i, n_u = spec.num_items, spec.num_users
    z = rng.standard_normal((n_i, spec.z_dim))
    specific = [rng.standard_normal((n_i, spec.s_dim)) for _ in range(spec.num_modalities)]
    w = rng.standard_normal((n_u, spec.z_dim))
    latent_dim = spec.z_dim + spec.s_dim
    tables = []
    for m, d_m in enumerate(spec.modality_dims):
        A = rng.standard_normal((d_m, latent_dim)) / np.sqrt(latent_dim)
        x = np.concatenate([z, specific[m]], axis=1) @ A.T
        x = x + spec.noise * rng.standard_normal(x.shape)
        tables.append(ModalityTable(m, x.astype(np.float32), np.ones(n_i, dtype=bool)))

    # Gumbel top-n = sampling n items without replacement in proportion to softmax(w_u · z_i)
    logits = w @ z.T
    gumbel = -np.log(-np.log(rng.uniform(size=logits.shape)))
    picks = np.argsort(-(logits + gumbel), axis=1, kind="stable")[:, : spec.interactions_per_user]

    split_rng = _rng(spec.seed, 1)
    train, valid, test = [], [], []
    for u in range(n_u):
        items = split_rng.permutation(picks[u])
        n = len(items)
        n_test = n_valid = n // 10
        if n - n_test - n_valid < 1:
            n_test = n_valid = 0
        test += [(u, i) for i in items[:n_test]]
        valid += [(u, i) for i in items[n_test:n_test + n_valid]]
        train += [(u, i) for i in items[n_test + n_valid:]]
    ds = InteractionDataset(n_u, n_i, np.array(train), np.array(valid), np.array(test))
    return ds, tables, Latents(z, specific, w)


def make_missing_plan_levels(num_items: int, num_modalities: int, seed: int) -> MissingPlan:
    if num_modalities not in (2, 3):
        raise DataError(f"levels plan supports 2 or 3 modalities, got {num_modalities}")
    rng = _rng(seed, 2)
    levels = num_modalities + 1
    order = rng.permutation(num_items)
    # group g gets positions [bounds[g], bounds[g+1]) of the permutation
    bounds = np.linspace(0, num_items, levels + 1).round().astype(int)
    missing = np.zeros((num_items, num_modalities), dtype=bool)
    for level in range(levels):
        for item in order[bounds[level]:bounds[level + 1]]:
            missing[item, rng.permutation(num_modalities)[:level]] = True
    return MissingPlan("levels", missing)


def make_missing_plan_ratio(
    num_items: int, num_modalities: int, ratios: list[float], seed: int
) -> list[MissingPlan]:
    """Nested plans: a fixed random order over (item, modality) entries, cut at each ratio."""
    ratios = [float(r) for r in ratios]
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise DataError("ratios must lie in [0, 1]")
    if any(b < a for a, b in zip(ratios, ratios[1:])):
        raise DataError("ratios must be sorted ascending")
    rng = _rng(seed, 3)
    total = num_items * num_modalities
    order = rng.permutation(total)
    plans = []
    for r in ratios:
        flat = np.zeros(total, dtype=bool)
        flat[order[: int(round(r * total))]] = True
        plans.append(MissingPlan("ratio", flat.reshape(num_items, num_modalities), ratio=r))
    return plans


def no_missing_plan(num_items: int, num_modalities: int) -> MissingPlan:
    return MissingPlan("ratio", np.zeros((num_items, num_modalities), dtype=bool), ratio=0.0)


def apply_missing_plan(tables: list[ModalityTable], plan: MissingPlan) -> list[ModalityTable]:
    """Hide planned entries; hidden rows hold the mean of the remaining available rows."""
    out = []
    for m, table in enumerate(tables):
        t = ModalityTable(m, table.features.copy(), table.available & ~plan.missing[:, m])
        if t.available.any():
            t.features[~t.available] = t.available_mean()
        else:
            t.features[:] = 0.0
        out.append(t)
    return out


def holdout_new_items(ds: InteractionDataset, fraction: float, seed: int) -> InteractionDataset:
    """Flag ``fraction`` of items as new: all their pairs move to test.

    Users that end up with no training pair lose all their pairs (they are
    dropped from every split; their ids stay reserved).
    """
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must lie in (0, 1)")
    rng = _rng(seed, 4)
    n_new = max(1, int(round(fraction * ds.num_items)))
    flags = np.zeros(ds.num_items, dtype=bool)
    flags[rng.permutation(ds.num_items)[:n_new]] = True
    moved = [p[flags[p[:, 1]]] for p in (ds.train, ds.valid)]
    train = ds.train[~flags[ds.train[:, 1]]]
    valid = ds.valid[~flags[ds.valid[:, 1]]]
    test = np.concatenate([ds.test, *moved])
    keep_user = np.bincount(train[:, 0], minlength=ds.num_users) > 0
    if not keep_user.any():
        raise DataError("holdout removed every user's training history")
    valid = valid[keep_user[valid[:, 0]]]
    test = test[keep_user[test[:, 0]]]
    return InteractionDataset(ds.num_users, ds.num_items, train, valid, test, flags)


def co_interaction_counts(ds: InteractionDataset) -> np.ndarray:
    """(items, items) number of training users shared by each item pair; diagonal zeroed."""
    from scipy import sparse

    pairs = ds.train
    R = sparse.csr_matrix(
        (np.ones(len(pairs), dtype=np.float64), (pairs[:, 0], pairs[:, 1])),
        shape=(ds.num_users, ds.num_items),
    )
    R.data[:] = 1.0
    co = (R.T @ R).toarray()
    np.fill_diagonal(co, 0.0)
    return co


def impute_baseline(table: ModalityTable, ds: InteractionDataset, method: str) -> ModalityTable:
    if method not in ("global_mean", "nn_mean"):
        raise DataError(f"unknown imputation method {method!r}")
    out = table.copy()
    mean = table.available_mean()
    missing = np.flatnonzero(~table.available)
    if method == "global_mean" or len(missing) == 0:
        out.features[missing] = mean
        return out
    co = co_interaction_counts(ds)
    co[:, ~table.available] = 0.0
    ids = np.arange(table.num_items)
    for i in missing:
        counts = co[i]
        eligible = np.flatnonzero(counts > 0)
        if len(eligible) == 0:
            out.features[i] = mean
            continue
        # most shared users first, then lower item id
        order = np.lexsort((ids[eligible], -counts[eligible]))
        nbrs = eligible[order[:NN_NEIGHBORS]]
        out.features[i] = table.features[nbrs].mean(axis=0, dtype=np.float64)
    return out


def build_bundle(spec: SyntheticSpec, plan: MissingPlan | None = None) -> DatasetBundle:
    """Draw a corpus and apply its missing-data protocol (or an explicit ``plan``)."""
    ds, truth, latents = generate_corpus(spec)
    if spec.new_item_fraction > 0:
        ds = holdout_new_items(ds, spec.new_item_fraction, spec.seed)
    if plan is None:
        if spec.missing_mode == "levels":
            plan = make_missing_plan_levels(spec.num_items, spec.num_modalities, spec.seed)
        elif spec.missing_mode == "ratio":
            (plan,) = make_missing_plan_ratio(
                spec.num_items, spec.num_modalities, [spec.missing_ratio], spec.seed
            )
        else:
            plan = no_missing_plan(spec.num_items, spec.num_modalities)
    tables = apply_missing_plan(truth, plan)
    return DatasetBundle(ds, tables, plan, truth, latents, spec)


def with_plan(bundle: DatasetBundle, plan: MissingPlan) -> DatasetBundle:
    if bundle.truth is None:
        raise DataError("re-planning needs the ground-truth tables")
    return dataclasses.replace(bundle, plan=plan, tables=apply_missing_plan(bundle.truth, plan))
