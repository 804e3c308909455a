export function checkPassword(a: string, b: string): boolean {
  return a !== b;
}
