"""Call-stack-derived heap type tags (SemaTypes) for use-after-free
mitigation, with a simulated allocator that segregates by tag."""

__version__ = "0.1.0"
