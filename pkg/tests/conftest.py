import numpy as np
import pytest

from curvcert.network import Mlp

KINDS = ("sigmoid", "tanh", "softplus")


def random_net(rng, widths, activation="sigmoid", scale=1.0, bias=True):
    """Gaussian weights / scale sqrt(fan_in), optional Gaussian biases."""
    Ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        Ws.append(scale * rng.standard_normal((b, a)) / np.sqrt(a))
        bs.append(rng.standard_normal(b) if bias else np.zeros(b))
    return Mlp.from_arrays(Ws, bs, activation)


def naive_forward(net, x):
    """Straight re-implementation of the layer recurrence, no shared helpers."""
    a = np.asarray(x, dtype=float)
    out = []
    for I, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = np.array([sum(W[i, j] * a[j] for j in range(W.shape[1])) + b[i] for i in range(W.shape[0])])
        out.append(z)
        if I < net.depth - 1:
            if net.activation.value == "sigmoid":
                a = 1.0 / (1.0 + np.exp(-z))
            elif net.activation.value == "tanh":
                a = np.tanh(z)
            else:
                a = np.log(1.0 + np.exp(z))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_split():
    """4000 train / 1000 test images from the 5000-image MNIST sample bundled with mlxtend."""
    mlx = pytest.importorskip("mlxtend.data")
    from curvcert.data_io import Dataset

    X, y = mlx.mnist_data()
    perm = np.random.default_rng(0).permutation(X.shape[0])
    X = X[perm] / 255.0
    y = y[perm].astype(np.int64)
    return Dataset(X[:4000], y[:4000]), Dataset(X[4000:], y[4000:])


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory, mnist_split):
    from curvcert.data_io import write_idx

    d = tmp_path_factory.mktemp("mnist")
    paths = {}
    for name, ds in zip(("train", "test"), mnist_split):
        img, lab = d / f"{name}-images-idx3-ubyte", d / f"{name}-labels-idx1-ubyte"
        write_idx(np.rint(ds.images * 255).astype(np.uint8), ds.labels, img, lab)
        paths[name] = (str(img), str(lab))
    return paths


def _train_pair(mnist_split, gamma):
    from curvcert.network import glorot_uniform
    from curvcert.training import TrainConfig, train

    tr, _ = mnist_split
    net = glorot_uniform([784, 64, 10], "sigmoid", np.random.default_rng(0))
    cfg = TrainConfig(gamma=gamma, epochs=5, batch_size=32, learning_rate=0.01, optimizer="adam",
                      mode="standard" if gamma == 0 else "curvature_only", seed=0)
    return train(net, tr, cfg, record_time=False)


@pytest.fixture(scope="session")
def trained_standard(mnist_split):
    return _train_pair(mnist_split, 0.0)


@pytest.fixture(scope="session")
def trained_regularized(mnist_split):
    return _train_pair(mnist_split, 0.03)
