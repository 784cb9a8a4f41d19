"""
Rollout, Training and Evaluation Scripts
"""
