"""Dataset loaders (IDX, flat event vectors) and synthetic task generators."""

from dataclasses import dataclass, field
import struct

import numpy as np

from .kernels import InputSet
from .finite_width import init_network, forward

__all__ = [
    "Dataset",
    "load_idx",
    "load_event_vectors",
    "save_event_vectors",
    "make_synthetic",
    "energy_from_label",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: InputSet
    labels: np.ndarray
    name: str = ""
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = np.atleast_2d(np.asarray(self.labels, dtype=float))
        if labels.shape[0] != self.inputs.count and labels.shape[1] == self.inputs.count:
            labels = labels.T
        if labels.shape[0] != self.inputs.count:
            raise ValueError("label rows do not match input rows")
        if not np.all(np.isfinite(labels)):
            raise ValueError("labels contain non-finite entries")
        object.__setattr__(self, "labels", labels)

    @property
    def count(self):
        return self.inputs.count

    @property
    def n_out(self):
        return self.labels.shape[1]


def _read_be32(f):
    data = f.read(4)
    if len(data) != 4:
        raise ValueError("truncated IDX header")
    return struct.unpack(">I", data)[0]


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair as a flattened one-hot dataset.

    Pixels are scaled to [0, 1]; labels become 10-dim one-hot rows.
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f)
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError("bad image magic 0x%08x" % magic)
        count = _read_be32(f)
        rows = _read_be32(f)
        cols = _read_be32(f)
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise ValueError("truncated IDX image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError("bad label magic 0x%08x" % magic)
        label_count = _read_be32(f)
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise ValueError("truncated IDX label payload")
        digits = np.frombuffer(raw, dtype=np.uint8)

    if label_count != count:
        raise ValueError("image count %d != label count %d" % (count, label_count))
    onehot = np.zeros((count, 10))
    onehot[np.arange(count), digits] = 1.0
    return Dataset(
        inputs=InputSet(images.astype(float) / 255.0),
        labels=onehot,
        name="idx",
        normalization={"pixel_scale": 255.0},
    )


def load_event_vectors(path, energy_min, energy_max):
    """Load flattened event vectors with scalar energy labels.

    Binary layout: u64 LE count, u64 LE input dim, then per event `dim`
    f64 inputs followed by one f64 energy label. Energies are mapped
    affinely onto [0.1, 1.0]; the map is recorded for inversion.
    """
    if energy_max <= energy_min:
        raise ValueError("energy_max must exceed energy_min")
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError("truncated event file header")
        count, dim = struct.unpack("<QQ", header)
        payload = f.read(count * (dim + 1) * 8)
    if len(payload) != count * (dim + 1) * 8:
        raise ValueError("truncated event file payload")
    data = np.frombuffer(payload, dtype="<f8").reshape(count, dim + 1)
    energies = data[:, -1]
    if np.any(energies < energy_min) or np.any(energies > energy_max):
        raise ValueError("event energy outside [%g, %g]" % (energy_min, energy_max))
    labels = 0.1 + 0.9 * (energies - energy_min) / (energy_max - energy_min)
    return Dataset(
        inputs=InputSet(data[:, :-1].copy()),
        labels=labels[:, None],
        name="events",
        normalization={"energy_min": float(energy_min), "energy_max": float(energy_max)},
    )


def save_event_vectors(path, inputs, energies):
    """Write the flat event-vector binary layout read by load_event_vectors."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    energies = np.asarray(energies, dtype=float).ravel()
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", X.shape[0], X.shape[1]))
        f.write(np.ascontiguousarray(np.column_stack([X, energies]), dtype="<f8").tobytes())


def energy_from_label(dataset, labels):
    """Invert the affine [0.1, 1.0] energy normalization."""
    lo = dataset.normalization["energy_min"]
    hi = dataset.normalization["energy_max"]
    return lo + (np.asarray(labels) - 0.1) / 0.9 * (hi - lo)


def make_synthetic(generator, n_points, input_dim, seed, teacher_arch=None, noise=0.0):
    """Deterministic synthetic datasets for desk-scale experiments.

    generator "teacher": standard-normal inputs labeled by a frozen
    randomly initialized MLP. generator "sinusoid": inputs uniform on
    [-1, 1]^d, scalar label prod_j sin(pi x_j) plus optional noise.
    """
    rng = np.random.default_rng(seed)
    if generator == "teacher":
        if teacher_arch is None:
            raise ValueError("teacher generator needs a teacher_arch")
        X = rng.standard_normal((n_points, input_dim))
        teacher = init_network(teacher_arch, seed + 1)
        Y = forward(teacher, X)
        if noise > 0:
            Y = Y + noise * rng.standard_normal(Y.shape)
        return Dataset(
            inputs=InputSet(X), labels=Y, name="teacher", normalization={"seed": seed}
        )
    if generator == "sinusoid":
        X = rng.uniform(-1.0, 1.0, size=(n_points, input_dim))
        Y = np.prod(np.sin(np.pi * X), axis=1)[:, None]
        if noise > 0:
            Y = Y + noise * rng.standard_normal(Y.shape)
        return Dataset(
            inputs=InputSet(X), labels=Y, name="sinusoid", normalization={"seed": seed}
        )
    raise ValueError("unknown synthetic generator %r" % generator)
