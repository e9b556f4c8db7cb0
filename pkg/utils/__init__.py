# Utils package for shared utilities 