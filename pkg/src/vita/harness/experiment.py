"""Directional desk experiment: plain ERM vs the full multi-source mixture vs
the mixture without generated samples, on the synthetic benchmark."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from scipy.stats import binomtest

from ..corruptions import build_corruption_suite
from ..datasets import SyntheticDatasetSpec, generate_synthetic_dataset
from ..metrics import build_report, evaluate_suite
from ..networks import Classifier
from ..training import TrainConfig, harvest_gan_pairs, robust_train, train_erm, train_translator, translator_from_config
from .pipeline import _split_validation

ARMS = ("erm", "vita", "wo_gen")


@dataclass
class DirectionalSettings:
    classes: int = 4
    size: int = 32
    n_train: int = 512
    n_test: int = 200
    # squeezes images toward mid-gray so weather and digital shifts actually hurt
    contrast: float = 0.35
    epochs: int = 20
    gan_epochs: int = 10
    pretrain_epochs: int = 3
    harvest_steps: int = 10
    width: int = 16
    translator_base: int = 16
    seeds: Sequence[int] = (0, 1, 2)


@dataclass
class SeedOutcome:
    seed: int
    mce: Dict[str, float]
    clean_error: Dict[str, float]
    categories: Dict[str, Dict[str, float]]
    seconds: float


@dataclass
class DirectionalResult:
    settings: DirectionalSettings
    outcomes: List[SeedOutcome] = field(default_factory=list)

    def wins(self, better: str, worse: str) -> int:
        return sum(o.mce[better] < o.mce[worse] for o in self.outcomes)

    def sign_test(self, better: str, worse: str) -> float:
        """One-sided sign-test p-value for ``better`` having the lower mCE."""
        return float(binomtest(self.wins(better, worse), len(self.outcomes), 0.5, alternative="greater").pvalue)

    @property
    def vita_beats_erm_everywhere(self) -> bool:
        return self.wins("vita", "erm") == len(self.outcomes)

    @property
    def generation_helps_on_majority(self) -> bool:
        return 2 * self.wins("vita", "wo_gen") > len(self.outcomes)

    def to_dict(self) -> dict:
        return {"settings": {**asdict(self.settings), "seeds": list(self.settings.seeds)},
                "outcomes": [asdict(o) for o in self.outcomes],
                "vita_beats_erm_everywhere": self.vita_beats_erm_everywhere,
                "generation_helps_on_majority": self.generation_helps_on_majority,
                "sign_test_vita_vs_erm": self.sign_test("vita", "erm"),
                "sign_test_vita_vs_wo_gen": self.sign_test("vita", "wo_gen")}


def run_seed(s: DirectionalSettings, seed: int, log: Callable[[str], None] = lambda m: None) -> SeedOutcome:
    start = time.perf_counter()
    spec = SyntheticDatasetSpec(n_train=s.n_train, n_test=s.n_test, classes=s.classes, size=s.size,
                                seed=seed, contrast=s.contrast)
    ds = generate_synthetic_dataset(spec)
    train, val = _split_validation(ds.train, seed)
    suite = build_corruption_suite(ds.test, seed=seed)
    cfg = TrainConfig(epochs=s.epochs, gan_epochs=s.gan_epochs, pretrain_epochs=s.pretrain_epochs,
                      harvest_steps=s.harvest_steps, seed=seed)

    source = Classifier(3, s.classes, s.width, seed=seed + 100)
    train_erm(source, train, cfg.model_copy(update={"epochs": s.pretrain_epochs}))
    t, d = translator_from_config(3, seed, base_channels=s.translator_base)
    train_translator(t, d, harvest_gan_pairs(train, source, cfg, seed), cfg)

    mce, clean, cats = {}, {}, {}
    for arm in ARMS:
        model = Classifier(3, s.classes, s.width, seed=seed)
        if arm == "erm":
            train_erm(model, train, cfg, val)
        elif arm == "vita":
            robust_train(model, train, t, cfg, val)
        else:
            robust_train(model, train, None, cfg.model_copy(update={"fractions": (0.5, 0.5, 0.0)}), val)
        table = evaluate_suite(model, suite, ds.test)
        report = build_report(table)
        mce[arm], clean[arm], cats[arm] = report.mce, table.clean_error, dict(report.categories)
        log(f"seed {seed} {arm}: mCE {mce[arm]:.4f} clean {clean[arm]:.4f} "
            + " ".join(f"{k} {v:.3f}" for k, v in cats[arm].items()))
    return SeedOutcome(seed, mce, clean, cats, round(time.perf_counter() - start, 1))


def directional_experiment(settings: Optional[DirectionalSettings] = None,
                           log: Callable[[str], None] = lambda m: None) -> DirectionalResult:
    settings = settings or DirectionalSettings()
    result = DirectionalResult(settings)
    for seed in settings.seeds:
        result.outcomes.append(run_seed(settings, seed, log))
    return result


if __name__ == "__main__":
    import argparse
    import sys
    ap = argparse.ArgumentParser(description="ERM vs full mixture vs no-generation ablation")
    for name, default in asdict(DirectionalSettings()).items():
        if name == "seeds":
            ap.add_argument("--seeds", type=int, nargs="+", default=list(default))
        else:
            ap.add_argument(f"--{name}", type=type(default), default=default)
    args = vars(ap.parse_args())
    res = directional_experiment(DirectionalSettings(**args), log=lambda m: print(m, file=sys.stderr, flush=True))
    print(json.dumps(res.to_dict(), indent=1))
