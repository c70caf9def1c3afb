// placeholder; filled in after the core builds
#include <iostream>
int main() { std::cout << "ablation placeholder\n"; return 0; }
