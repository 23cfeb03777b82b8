//! CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, MSB first, no final xor.

const POLY: u16 = 0x1021;
const INIT: u16 = 0xFFFF;

const TABLE: [u16; 256] = build_table();

const fn build_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ POLY } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// Incremental CRC state.
#[derive(Debug, Clone, Copy)]
pub struct Crc16(u16);

impl Default for Crc16 {
    fn default() -> Self {
        Self(INIT)
    }
}

impl Crc16 {
    pub fn update(&mut self, data: &[u8]) {
        for &b in data {
            self.0 = (self.0 << 8) ^ TABLE[usize::from((self.0 >> 8) as u8 ^ b)];
        }
    }

    pub fn finish(self) -> u16 {
        self.0
    }
}

pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc = Crc16::default();
    crc.update(data);
    crc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
        assert_eq!(crc16_ccitt_false(&[]), 0xFFFF);
    }

    #[test]
    fn incremental_matches_one_shot() {
        let mut c = Crc16::default();
        c.update(b"1234");
        c.update(b"56789");
        assert_eq!(c.finish(), 0x29B1);
    }
}
