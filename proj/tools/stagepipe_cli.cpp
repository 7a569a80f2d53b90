// Placeholder main; subcommands land once the serving stack is in place.
int main() { return 0; }
