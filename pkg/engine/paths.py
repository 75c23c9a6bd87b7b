import os
from dataclasses import dataclass
from pathlib import Path


PROJECT_ROOT = Path(__file__).resolve().parent.parent
RUNS_DIR = Path(os.environ.get("MSN_RUNS_DIR", PROJECT_ROOT / "runs")).resolve()
CONFIG_DIR = Path(os.environ.get("MSN_CONFIG_DIR", PROJECT_ROOT / "config")).resolve()

STEP_DIRS = {
    1: "step1",
    2: "step2",
    3: "step3",
}


@dataclass(frozen=True)
class RunPaths:
    root: str
    config_path: str
    data_dir: str
    slides_dir: str
    splits_path: str
    checkpoints_dir: str
    gaps_dir: str
    reports_dir: str
    plots_dir: str
    log_dir: str
    lock_file: str

    def checkpoint(self, name):
        return os.path.join(self.checkpoints_dir, name)

    def step_checkpoint(self, step, *, train_split=False):
        name = STEP_DIRS[step]
        if train_split and step > 1:
            name = f"{name}_train"
        return self.checkpoint(name)

    def baseline_checkpoint(self, baseline):
        return self.checkpoint(f"baseline_{baseline.replace('-', '_')}")

    def train_log(self, step, *, suffix=""):
        return os.path.join(self.reports_dir, f"log_step{step}{suffix}.csv")

    def baseline_log(self, baseline):
        return os.path.join(self.reports_dir, f"log_baseline_{baseline.replace('-', '_')}.csv")

    def gap_profile(self, branch):
        return os.path.join(self.gaps_dir, f"gaps_{branch}.json")


def ensure_dir(path):
    if path:
        os.makedirs(path, exist_ok=True)


def resolve_run_dir(path):
    if not path:
        raise ValueError("run directory is required")
    if os.path.isabs(path):
        return os.path.abspath(path)
    return os.path.abspath(os.path.join(RUNS_DIR, path))


def resolve_config_path(path):
    if os.path.isabs(path) or os.path.exists(path):
        return os.path.abspath(path)
    return os.path.abspath(os.path.join(CONFIG_DIR, path))


def build_run_paths(run_dir, *, create=True):
    root = Path(resolve_run_dir(run_dir))
    data_dir = root / "data"
    paths = RunPaths(
        root=str(root),
        config_path=str(root / "config.json"),
        data_dir=str(data_dir),
        slides_dir=str(data_dir / "slides"),
        splits_path=str(data_dir / "splits.json"),
        checkpoints_dir=str(root / "checkpoints"),
        gaps_dir=str(root / "gaps"),
        reports_dir=str(root / "reports"),
        plots_dir=str(root / "plots"),
        log_dir=str(root / "logs"),
        lock_file=str(root / ".msn.lock"),
    )
    if create:
        for d in (
            paths.data_dir,
            paths.slides_dir,
            paths.checkpoints_dir,
            paths.gaps_dir,
            paths.reports_dir,
            paths.plots_dir,
            paths.log_dir,
        ):
            ensure_dir(d)
    return paths
