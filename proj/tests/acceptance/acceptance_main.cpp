// placeholder; filled in after the core builds
#include <iostream>
int main() { std::cout << "acceptance placeholder\n"; return 0; }
