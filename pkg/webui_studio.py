import io
import os
from contextlib import redirect_stderr, redirect_stdout
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

from webui_utils import ProgressTracker, ensure_directory, import_hyphenated_file, list_config_files


class VanLoanStudio:
    def __init__(self, base_dir: Optional[str] = None):
        """Initialize the studio around the command-line entry points"""
        self.base_dir = base_dir or os.path.dirname(os.path.abspath(__file__))
        self.config_dir = os.path.join(self.base_dir, "configs")
        self.output_dir = os.path.join(self.base_dir, "output")
        os.makedirs(self.output_dir, exist_ok=True)

        try:
            print("Loading processing modules...")
            self.cli = import_hyphenated_file("vanloan-grape.py")
            print("- Loaded vanloan-grape")
        except Exception as e:
            print(f"Error loading modules: {str(e)}")
            raise

    def available_configs(self) -> List[str]:
        return list_config_files(Path(self.config_dir))

    def resolve_config_path(self, config: str) -> Optional[str]:
        """Config names resolve against configs/, other relative paths against the studio folder"""
        if not config:
            return None
        candidates = [config] if os.path.isabs(config) else [
            os.path.join(self.config_dir, config),
            os.path.join(self.base_dir, config),
        ]
        for path in candidates:
            if os.path.isfile(path):
                return path
        return None

    def create_output_folder(self, base_name: str) -> str:
        """Create and return a timestamped output folder"""
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        output_folder = os.path.join(self.output_dir, f"{base_name}_{timestamp}")
        ok, message = ensure_directory(Path(output_folder))
        if not ok:
            raise OSError(message)
        return output_folder

    def run_command(self, argv: List[str]) -> Tuple[int, str]:
        """Run a CLI command in-process and capture what it prints"""
        buffer = io.StringIO()
        with redirect_stdout(buffer), redirect_stderr(buffer):
            code = self.cli.main(argv)
        return code, buffer.getvalue()

    def _run(self, command: str, config: str, extra: List[str], label: str) -> str:
        progress = ProgressTracker()
        config_path = self.resolve_config_path(config)
        if config_path is None:
            return progress.update(f"Config not found: {config}", "error")
        name = os.path.splitext(os.path.basename(config_path))[0]
        output_folder = self.create_output_folder(f"{command}_{name}")
        progress.update(f"Running {label} with {os.path.basename(config_path)}")
        code, text = self.run_command([command, config_path, "--out", output_folder, "--quiet"] + extra)
        progress.extend(text)
        if code == self.cli.EXIT_OK:
            progress.update(f"{label.capitalize()} complete ({progress.get_elapsed()})", "success")
        elif code == self.cli.EXIT_BEST_EFFORT:
            progress.update(f"{label.capitalize()} finished below the fidelity threshold", "warning")
        else:
            progress.update(f"{label.capitalize()} failed with exit code {code}", "error")
        return progress.update(f"Output saved to: {output_folder}")

    @staticmethod
    def _pulse_args(pulse: Optional[str]) -> List[str]:
        return ["--pulse", pulse] if pulse else []

    def process_optimize(self, config: str, seed: Optional[int] = None, threads: int = 1) -> str:
        try:
            extra = ["--threads", str(int(threads))]
            if seed is not None:
                extra += ["--seed", str(int(seed))]
            return self._run("optimize", config, extra, "optimization")
        except Exception as e:
            return self.process_error(e, "optimization")

    def process_evaluate(self, config: str, pulse: Optional[str] = None, realizations: Optional[int] = None,
                         static_mode: str = "fixed", threads: int = 1) -> str:
        try:
            extra = self._pulse_args(pulse) + ["--static-mode", static_mode, "--threads", str(int(threads))]
            if realizations:
                extra += ["--realizations", str(int(realizations))]
            return self._run("evaluate", config, extra, "evaluation")
        except Exception as e:
            return self.process_error(e, "evaluation")

    def process_filter_function(self, config: str, pulse: Optional[str] = None,
                                noise: Optional[str] = None) -> str:
        try:
            extra = self._pulse_args(pulse) + (["--noise", noise] if noise else [])
            return self._run("filter-function", config, extra, "filter function")
        except Exception as e:
            return self.process_error(e, "filter function")

    def process_error(self, error, context="operation"):
        """Format error message with context"""
        return f"Error during {context}: {str(error)}"
