"""A miniature proof assistant that processes documents out of order.

Documents are statically analyzed into a DAG of transactions; theorems are
admitted as soon as their statements check, while their opaque proofs are
verified asynchronously by isolated worker processes.  The same machinery
powers a batch compiler with a quick/complete two-phase chain and a
long-running editing service with perspective-driven scheduling.
"""

__version__ = "0.1.0"
