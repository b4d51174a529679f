"""
modules.core holds one class per pipeline stage: flow pre-training, detection training,
the alternating schedule, evaluation, the low-data benchmark and the gradient-check suite.
"""
