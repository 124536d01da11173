// CLI entry point; subcommands are wired in below.
#include <iostream>

int main() {
  std::cout << "tnet: not yet wired\n";
  return 0;
}
