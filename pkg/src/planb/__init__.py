"""Multi-hypothesis action forecasting.

A collaborative two-level GRU encoder/decoder predicts the remaining action
sequence (and relative durations) of a partially observed video.  K decoder
threads are coordinated through a choice table -- a similarity penalty pushes
their outputs apart and random loss negation lets individual threads escape a
shared minimum -- so the ranked threads cover the most likely alternative
futures.  The package ships a synthetic stochastic-grammar generator with an
exact future-enumeration oracle, Breakfast-convention dataset I/O, the full
evaluation protocol (mean-over-class accuracy@k, MPTA@k, Choice F1), a
trainer, and a CLI.
"""

__version__ = "0.1.0"
