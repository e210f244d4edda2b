#include <iostream>
int main() { std::cout << "emnet\n"; return 0; }
