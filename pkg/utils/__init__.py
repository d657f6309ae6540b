"""Utils package for the backdoor poisoning laboratory."""
