"""breachlab: a desk-scale lab for recovering a classifier service after model leaks.

The pieces, bottom to top:

- ``nnet``          dense softmax classifiers with analytic gradients and SGD
- ``datagen``       synthetic classification tasks and procedural hidden distributions
- ``versioning``    joint training of model versions and the on-disk version store
- ``filtering``     the loss-gap filter that flags inputs overfit to leaked versions
- ``attacks``       white-box attack suite (PGD / CW / EAD and adaptive variants)
- ``transferbound`` analytic lower bound on the cross-version loss gap, with
                    Monte-Carlo verification
- ``experiment``    the multi-breach game, sweeps, and NBR bookkeeping
- ``report``        CSV/JSON reports plus rendered figures
- ``gateway``       a filtered inference service with breach-triggered rotation
- ``cli``           the ``breachlab`` command line
"""

__version__ = "0.1.0"
