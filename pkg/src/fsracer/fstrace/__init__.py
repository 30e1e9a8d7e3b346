"""Trace constructs (``syntax``), the syscall modeler (``model``) and the
interpreter (``interpreter``)."""
