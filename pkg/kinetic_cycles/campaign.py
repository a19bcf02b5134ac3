import csv
import json
import logging
import math
import os
import signal
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import timeout_decorator
from tenacity import RetryError

from .config_classes import EXPERIMENTS, ExperimentConfig
from .experiments import RUNNERS, ExperimentResult

logger = logging.getLogger(__name__)


class ExperimentTimeout(TimeoutError):
    def __init__(self, message="Experiment exceeded its time budget"):
        super().__init__(message)


class WorkerPool:
    """
    Ordered map over a process pool; runs inline with a single worker.

    Results come back in task order either way, so merged outputs do not
    depend on the worker count.
    """

    def __init__(self, workers: int = 1):
        self.workers = workers
        self._executor = None

    def __enter__(self):
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._executor is not None:
            # a timed-out experiment leaves futures behind
            self._executor.shutdown(wait=exc_type is None, cancel_futures=exc_type is not None)
            self._executor = None
        return False

    def map(self, fn: Callable, tasks) -> List:
        tasks = list(tasks)
        if self._executor is None:
            return [fn(task) for task in tasks]
        return list(self._executor.map(fn, tasks))


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def write_csv(path: str, rows: Sequence[dict]):
    columns = []
    for row in rows:
        columns.extend(key for key in row if key not in columns)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(column)) for column in columns])


class ExperimentCampaign:
    """Runs the configured experiments and writes the report directory."""

    def __init__(self, config: ExperimentConfig, experiments: Optional[Sequence[str]] = None):
        self.config = config
        if experiments is None:
            chosen = config.run.experiment
            experiments = list(EXPERIMENTS) if chosen == "all" else [chosen]
        self.experiments = list(experiments)
        self.catched_errors = []
        self.results: Dict[str, ExperimentResult] = {}
        self.runtimes: Dict[str, float] = {}
        self.run_dir = None

    @property
    def passed(self) -> bool:
        return not self.catched_errors and all(
            name in self.results and self.results[name].passed for name in self.experiments
        )

    def ctrl_c_signal_handler(self, sig, frame):
        logger.warning("STORING RESULTS BEFORE EXIT")
        self.store_results(partial=True)
        sys.exit(1)

    @staticmethod
    def make_json_serializable(obj):
        """
        Recursively convert results to JSON-compatible values.

        - dict: process keys/values recursively
        - list/tuple/ndarray: process elements recursively
        - numpy scalars: the matching Python scalar
        - non-finite floats: their string form
        """
        if isinstance(obj, dict):
            return {str(k): ExperimentCampaign.make_json_serializable(v) for k, v in obj.items()}
        elif isinstance(obj, (list, tuple, np.ndarray)):
            return [ExperimentCampaign.make_json_serializable(v) for v in obj]
        elif isinstance(obj, (bool, np.bool_)):
            return bool(obj)
        elif isinstance(obj, (int, np.integer)):
            return int(obj)
        elif isinstance(obj, (float, np.floating)):
            return float(obj) if math.isfinite(obj) else str(float(obj))
        else:
            return obj

    def reserve_run_dir(self) -> str:
        # Find a unique directory name
        counter = 0
        while os.path.exists(os.path.join(self.config.run.out, f"run_{counter}")):
            counter += 1
        path = os.path.join(self.config.run.out, f"run_{counter}")
        os.makedirs(path)
        return path

    def summary(self, partial: bool) -> dict:
        experiments = {}
        for name in self.experiments:
            entry = {"runtime_seconds": self.runtimes.get(name)}
            if name in self.results:
                result = self.results[name]
                entry.update({
                    "passed": result.passed,
                    "checks": [asdict(check) for check in result.checks],
                    "fits": result.fits,
                    "constants": result.constants,
                    "tables": sorted(result.tables),
                })
            else:
                entry["passed"] = False
            experiments[name] = entry
        return {
            "config_hash": self.config.config_hash(),
            "seed": self.config.run.seed,
            "quick": self.config.run.quick,
            "partial": partial,
            "passed": self.passed,
            "experiments": experiments,
            "catched_errors": self.catched_errors,
        }

    def store_results(self, partial: bool = False):
        if self.run_dir is None:
            self.run_dir = self.reserve_run_dir()
        with open(os.path.join(self.run_dir, "config_echo.ini"), "w", encoding="utf-8") as f:
            f.write(self.config.to_ini())
        for result in self.results.values():
            for table, rows in result.tables.items():
                write_csv(os.path.join(self.run_dir, f"{table}.csv"), rows)

        log_json = self.make_json_serializable(self.summary(partial))

        def default_serializer(obj):
            logger.error("Serialization failed for: %r", obj)
            return "SERIALIZATION_FAILED"

        with open(os.path.join(self.run_dir, f"summary{'_partial' if partial else ''}.json"), "w") as f:
            json.dump(log_json, f, indent=4, default=default_serializer)

    def run_experiment(self, name: str, pool: WorkerPool) -> ExperimentResult:
        runner = RUNNERS[name]
        budget = self.config.run.budget_seconds
        if budget > 0:
            runner = timeout_decorator.timeout(budget, timeout_exception=ExperimentTimeout)(runner)
        return runner(self.config, pool)

    def run_campaign(self) -> int:
        # Reset catched_errors and results
        self.catched_errors = []
        self.results = {}
        self.runtimes = {}
        self.run_dir = self.reserve_run_dir()
        logger.info("writing to %s (config hash %s)", self.run_dir, self.config.config_hash())

        # Store partial results on Ctrl+c
        signal.signal(signal.SIGINT, self.ctrl_c_signal_handler)

        try:
            with WorkerPool(self.config.run.workers) as pool:
                for index, name in enumerate(self.experiments):
                    logger.info("experiment %d/%d: %s", index + 1, len(self.experiments), name)
                    start = time.perf_counter()
                    try:
                        self.results[name] = self.run_experiment(name, pool)
                    except Exception as e:
                        # If e is a retry error, extract the underlying exception that caused it
                        if isinstance(e, RetryError) and e.last_attempt is not None:
                            e = e.last_attempt.exception() or e
                        self.catched_errors.append({"experiment": name, "error": f"{type(e).__name__}: {e}"})
                        logger.error("experiment %s failed:\n%s", name, traceback.format_exc())
                        self.runtimes[name] = time.perf_counter() - start
                        self.store_results(partial=True)
                        continue
                    self.runtimes[name] = time.perf_counter() - start
                    logger.info("experiment %d/%d: %s %s in %.1f s", index + 1, len(self.experiments), name,
                                "PASS" if self.results[name].passed else "FAIL", self.runtimes[name])

        # Global last resort error handling (store partial results and exit)
        except Exception as e:
            self.catched_errors.append({"experiment": "unknown", "error": str(e)})
            print("An error occurred:", file=sys.stderr)
            print("TRYING TO SAVE PARTIAL RESULTS!", file=sys.stderr)
            self.store_results(partial=True)
            traceback.print_exc()
            return 1

        self.store_results(partial=False)
        return 0 if self.passed else 1
