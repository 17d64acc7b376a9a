#!/usr/bin/env python3
"""
变量选择实验 - 命令行入口

用法：
    python varsel.py run --config experiment.toml --out results
    python varsel.py nullband --m 2000 --reps 1000
"""

import os
import sys

# 添加路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from varsel_engine.cli import main


if __name__ == "__main__":
    sys.exit(main())
