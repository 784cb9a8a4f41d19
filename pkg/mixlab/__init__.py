# -*- coding: utf-8 -*-
"""
mixlab
Teacher-interleaved rollouts and weighted-likelihood post-training for
multi-turn agents on synthetic long-horizon environments.
"""

__version__ = "1.0.0"
