"""Run configuration: YAML schema, network construction, weights container.

A config file has four sections: ``data`` (source and normalization),
``model`` (input shape, layer list, class count), ``train`` (layerwise
schedule knobs), and ``pretrain`` (subgradient warm-up). Weights are stored
in a small tagged binary container with little-endian headers and float64
payloads, so save/load round-trips are bit-exact.
"""

import os
import struct

import numpy as np
import yaml

from .baselines import SgdConfig
from .cccp import TrainConfig
from .data import load_cifar, load_idx, mnist_or_surrogate, normalize, split, synth_blobs
from .errors import BadMagicError, ConfigError, DataError, TruncatedFileError
from .layers import Affine, Conv, Dense, MaxPool, ReLU
from .network import NetworkState

__all__ = [
    "load_config",
    "build_network",
    "train_config",
    "sgd_config",
    "load_dataset",
    "save_weights",
    "load_weights",
]

WEIGHTS_MAGIC = b"PLNW"
WEIGHTS_VERSION = 1


def load_config(path):
    """Parse a YAML config file into a dict, rejecting non-mapping roots."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("cannot read %s: %s" % (path, exc)) from exc
    except yaml.YAMLError as exc:
        raise ConfigError("cannot parse %s: %s" % (path, exc)) from exc
    if not isinstance(cfg, dict):
        raise ConfigError("%s: top level must be a mapping" % path)
    return cfg


def _section(cfg, name, allowed, required=()):
    section = cfg.get(name, {})
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError("section %r must be a mapping" % name)
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError("section %r has unknown keys: %s"
                          % (name, ", ".join(sorted(unknown))))
    missing = set(required) - set(section)
    if missing:
        raise ConfigError("section %r is missing keys: %s"
                          % (name, ", ".join(sorted(missing))))
    return section


def _pairify(v):
    if isinstance(v, (list, tuple)):
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


def build_network(cfg, rng):
    """Construct the network described by the ``model`` section.

    Weights draw from scaled normal initializations (variance 2/fan-in for
    layers feeding rectifiers, 1/fan-in for the classifier); biases start at
    zero. The draw order is the layer order, so one seed fixes the network.
    """
    model = _section(cfg, "model", ("input", "classes", "layers"),
                     required=("input", "classes", "layers"))
    shape = tuple(int(d) for d in model["input"])
    if len(shape) != 3:
        raise ConfigError("model.input must be [channels, height, width]")
    layers = []
    spec_layers = model["layers"]
    if not isinstance(spec_layers, list) or not spec_layers:
        raise ConfigError("model.layers must be a non-empty list")
    chans = shape[0]
    for entry in spec_layers:
        if not isinstance(entry, dict) or "type" not in entry:
            raise ConfigError("each layer needs a 'type' key")
        kind = entry["type"]
        try:
            if kind == "conv":
                out = int(entry["out"])
                kh, kw = _pairify(entry.get("kernel", 3))
                fan_in = chans * kh * kw
                weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out, chans, kh, kw))
                bias = np.zeros(out) if entry.get("bias", True) else None
                layers.append(Conv(weight, bias,
                                   stride=int(entry.get("stride", 1)),
                                   padding=int(entry.get("padding", 0))))
                chans = out
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool":
                window = _pairify(entry.get("window", 2))
                stride = entry.get("stride")
                layers.append(MaxPool(window, None if stride is None else int(stride)))
            elif kind == "dense":
                out = int(entry["out"])
                probe = NetworkState.chain_shape(shape, layers)
                fan_in = int(np.prod(probe))
                weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out, fan_in))
                bias = np.zeros(out) if entry.get("bias", True) else None
                layers.append(Dense(weight, bias))
            elif kind == "affine":
                scale = np.asarray(entry["scale"], dtype=np.float64)
                shift = np.asarray(entry.get("shift", 0.0), dtype=np.float64)
                if shift.ndim == 0:
                    shift = np.full_like(scale, float(shift))
                layers.append(Affine(scale, shift))
            else:
                raise ConfigError("unknown layer type %r" % (kind,))
        except KeyError as exc:
            raise ConfigError("layer %r is missing key %s" % (kind, exc)) from exc
    n_classes = int(model["classes"])
    feat = int(np.prod(NetworkState.chain_shape(shape, layers)))
    svm = rng.normal(0.0, np.sqrt(1.0 / feat), (n_classes, feat))
    return NetworkState(shape, layers, svm)


def train_config(cfg):
    allowed = ("lam", "mu_ratio", "passes", "cccp_iterations", "cccp_tolerance",
               "epochs", "batch_size", "tol", "gap_tol", "patience", "space",
               "escalate", "eval_batch")
    section = _section(cfg, "train", allowed)
    try:
        return TrainConfig(**{k: section[k] for k in section})
    except TypeError as exc:
        raise ConfigError("bad train section: %s" % exc) from exc


def sgd_config(cfg, lam):
    allowed = ("optimizer", "lr", "epochs", "batch_size", "loss")
    section = _section(cfg, "pretrain", allowed)
    try:
        return SgdConfig(lam=lam, **{k: section[k] for k in section})
    except TypeError as exc:
        raise ConfigError("bad pretrain section: %s" % exc) from exc


def load_dataset(cfg, rng):
    """Materialize the ``data`` section: load, normalize, split.

    Returns ``(train, val, test)``; ``val`` is empty-free (None) when
    ``val_fraction`` is zero.
    """
    allowed = ("kind", "dir", "n_train", "n_test", "val_fraction", "normalize",
               "classes", "synth_n", "synth_size", "synth_seed", "cache_dir")
    section = _section(cfg, "data", allowed)
    kind = section.get("kind", "mnist")
    if kind == "mnist":
        train, test, _ = mnist_or_surrogate(
            cache_dir=section.get("cache_dir", "data"),
            seed=int(section.get("synth_seed", 0)),
            n_train=section.get("n_train"), n_test=section.get("n_test"))
    elif kind == "idx":
        root = section.get("dir")
        if not root:
            raise ConfigError("data.kind 'idx' needs data.dir")
        train = load_idx(os.path.join(root, "train-images-idx3-ubyte"),
                         os.path.join(root, "train-labels-idx1-ubyte"),
                         n_classes=section.get("classes"))
        test = load_idx(os.path.join(root, "t10k-images-idx3-ubyte"),
                        os.path.join(root, "t10k-labels-idx1-ubyte"),
                        n_classes=section.get("classes"))
    elif kind == "cifar":
        root = section.get("dir")
        if not root:
            raise ConfigError("data.kind 'cifar' needs data.dir")
        batches = [os.path.join(root, "data_batch_%d.bin" % i) for i in range(1, 6)]
        train = load_cifar(batches)
        test = load_cifar([os.path.join(root, "test_batch.bin")])
    elif kind == "synth":
        synth_seed = int(section.get("synth_seed", 0))
        train = synth_blobs(int(section.get("synth_n", 2000)),
                            n_classes=int(section.get("classes", 10)),
                            size=int(section.get("synth_size", 28)),
                            seed=synth_seed)
        test = synth_blobs(max(1, int(section.get("synth_n", 2000)) // 4),
                           n_classes=int(section.get("classes", 10)),
                           size=int(section.get("synth_size", 28)),
                           seed=synth_seed, sample_seed=synth_seed + 1)
    else:
        raise ConfigError("unknown data.kind %r" % (kind,))

    if kind != "mnist":
        if section.get("n_train"):
            train = train.subset(np.arange(min(int(section["n_train"]), len(train))))
        if section.get("n_test"):
            test = test.subset(np.arange(min(int(section["n_test"]), len(test))))

    frac = float(section.get("val_fraction", 0.1))
    if frac > 0.0:
        train, val = split(train, frac, rng)
    else:
        val = None
    mode = section.get("normalize", "per_pixel")
    if val is not None:
        (train, val, test), _ = normalize(train, (val, test), mode)
    else:
        (train, test), _ = normalize(train, (test,), mode)
    return train, val, test


def _weight_entries(net):
    entries = []
    for i, layer in enumerate(net.layers):
        name = net.layer_names[i]
        if layer.kind == "conv" or layer.kind == "dense":
            entries.append((name + ".weight", layer.weight))
            if layer.bias is not None:
                entries.append((name + ".bias", layer.bias))
        elif layer.kind == "affine":
            entries.append((name + ".scale", layer.scale))
            entries.append((name + ".shift", layer.shift))
    entries.append(("svm.weight", net.svm_weight))
    return entries


def save_weights(net, path):
    """Write every array the network owns into the tagged container."""
    entries = _weight_entries(net)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, count, path):
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError("%s: expected %d more bytes, found %d"
                                 % (path, count, len(data)))
    return data


def load_weights(net, path):
    """Restore arrays saved by :func:`save_weights` into a matching network.

    The entry names and shapes must match the network exactly; anything else
    raises a typed error rather than silently mis-assigning.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError("cannot read %s: %s" % (path, exc)) from exc
    with fh:
        magic = _read_exact(fh, 4, path)
        if magic != WEIGHTS_MAGIC:
            raise BadMagicError("%s: magic %r, expected %r"
                                % (path, magic, WEIGHTS_MAGIC))
        version, count = struct.unpack("<II", _read_exact(fh, 8, path))
        if version != WEIGHTS_VERSION:
            raise DataError("%s: container version %d unsupported" % (path, version))
        loaded = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path))
            dims = struct.unpack("<%dI" % ndim, _read_exact(fh, 4 * ndim, path))
            size = int(np.prod(dims)) if ndim else 1
            raw = _read_exact(fh, 8 * size, path)
            loaded[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
        if fh.read(1):
            raise DataError("%s: trailing bytes after %d entries" % (path, count))

    expected = _weight_entries(net)
    names = [name for name, _ in expected]
    if sorted(loaded) != sorted(names):
        raise DataError("%s: entries %s do not match network arrays %s"
                        % (path, sorted(loaded), sorted(names)))
    for name, arr in expected:
        new = loaded[name]
        if new.shape != arr.shape:
            raise DataError("%s: %s has shape %s, network expects %s"
                            % (path, name, new.shape, arr.shape))
        arr[...] = new
    return net
