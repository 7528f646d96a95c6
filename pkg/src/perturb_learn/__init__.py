"""Learning from adversarial and counterfactual perturbations.

Train a classifier, perturb its training inputs toward induced wrong target
classes (targeted PGD, Wachter-style CFE, sparse plausible CFE), retrain a
fresh model on the perturbed inputs with the target labels, and evaluate it
on clean inputs with the original labels.
"""

__version__ = "0.1.0"
