#include <cstdio>

int main() {
  std::puts("rrl: placeholder");
  return 0;
}
