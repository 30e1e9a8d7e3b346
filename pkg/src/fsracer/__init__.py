"""Find missing ordering relationships and missing notifiers in Puppet runs.

Pipeline: strace text -> trace entries -> blocks per Puppet resource ->
file-system effects per path -> checked against the catalog's
dependency graph.
"""

__version__ = "0.1.0"
