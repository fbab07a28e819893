#include <cstdio>

// CLI entry point; subcommands are registered as the pipeline modules land.
int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "ctphase: no subcommands registered yet\n");
  return 2;
}
