"""
Run Script for Wild OOD Experiments
Entry point for dataset generation, training, evaluation, sweeps and selection

Usage:
    python run_experiment.py generate --config configs/gaussian_separable.json
    python run_experiment.py train --config configs/gaussian_separable.json
"""

import sys
import os

# Add the project root to the Python path
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from wild_ood.cli import main


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nProgram interrupted by user. Exiting...")
        sys.exit(130)
