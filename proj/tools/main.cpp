#include <cstdio>

int main() {
  std::puts("zmesh: work in progress");
  return 1;
}
