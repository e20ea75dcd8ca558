import time

import numpy as np
import pytest
import torch

from ewir.data import ImageSet, write_cifar


def synthetic_images(n: int, num_classes: int = 10, seed: int = 0, noise: float = 25.0) -> ImageSet:
    """Learnable CIFAR-shaped data: each class has its own colour and stripe frequency."""
    palette_rng = np.random.default_rng(1234)
    palette = palette_rng.uniform(50, 205, size=(num_classes, 3))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    yy = np.arange(32)[None, :, None]
    xx = np.arange(32)[None, None, :]
    freq = (labels % 5 + 1)[:, None, None]
    orient = (labels // 5 % 2)[:, None, None]
    stripes = np.where(orient == 0, np.sin(freq * yy * np.pi / 16), np.sin(freq * xx * np.pi / 16))
    img = palette[labels][:, :, None, None] + 35.0 * stripes[:, None] + rng.normal(0, noise, (n, 3, 32, 32))
    return ImageSet(np.clip(img, 0, 255).astype(np.uint8), labels.astype(np.int64), num_classes)


@pytest.fixture
def synth():
    return synthetic_images


@pytest.fixture
def cifar10_dir(tmp_path):
    """A small CIFAR-10 binary tree (5 train batches + test batch) with synthetic content."""
    base = tmp_path / "cifar-10-batches-bin"
    base.mkdir()
    train = synthetic_images(500, 10, seed=1)
    for i in range(5):
        sl = slice(i * 100, (i + 1) * 100)
        write_cifar(base / f"data_batch_{i + 1}.bin", train.images[sl], train.labels[sl])
    test = synthetic_images(200, 10, seed=2)
    write_cifar(base / "test_batch.bin", test.images, test.labels)
    return tmp_path


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield


_ACCEPTANCE = pytest.StashKey[dict]()


class AcceptanceRecorder:
    """Records one verdict per acceptance criterion for the terminal summary."""

    def __init__(self, results: dict):
        self.results = results

    def check(self, number: int, title: str):
        recorder = self

        class _Check:
            def __enter__(self):
                self.start = time.perf_counter()
                return self

            def __exit__(self, exc_type, exc, tb):
                secs = time.perf_counter() - self.start
                if exc is None:
                    recorder.results[number] = ("PASS", title, f"{secs:.1f}s")
                else:
                    detail = str(exc).strip().splitlines()[0] if str(exc).strip() else exc_type.__name__
                    recorder.results[number] = ("FAIL", title, detail[:160])
                return False

        return _Check()


@pytest.fixture
def acceptance(request):
    return AcceptanceRecorder(request.config.stash.setdefault(_ACCEPTANCE, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        verdict, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}  [{detail}]")
